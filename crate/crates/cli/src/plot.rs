//! Static SVG figures: caption timelines and 2-D projections of dumped
//! embeddings.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use viewdvc::data::{EventAnnotation, EventPrediction, ViewLabel};
use viewdvc::trainer::EmbeddingRow;
use viewdvc::{Error, Result};

const WIDTH: f64 = 960.0;
const MARGIN: f64 = 40.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(width: f64, height: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

/// Ground-truth and predicted events of one video on a shared time axis,
/// one lane per event so overlapping predictions stay readable.
pub fn timeline_svg(video_id: &str, reference: &EventAnnotation, predictions: &[EventPrediction]) -> String {
    let lane = 22.0;
    let duration = reference.duration.max(1e-9);
    let n_ref = reference.segments.len();
    let height = MARGIN * 2.0 + lane * (n_ref + predictions.len()) as f64 + 40.0;
    let span = WIDTH - 2.0 * MARGIN;
    let x = |t: f64| MARGIN + span * (t / duration).clamp(0.0, 1.0);
    let mut s = header(WIDTH, height);
    let _ = writeln!(s, "<text x=\"{MARGIN}\" y=\"20\" font-size=\"13\">{}</text>", escape(video_id));
    let mut y = MARGIN;
    let bar = |s: &mut String, y: f64, a: f64, b: f64, fill: &str, label: &str| {
        let _ = writeln!(
            s,
            "<rect x=\"{:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{fill}\" opacity=\"0.8\"/>",
            x(a),
            (x(b) - x(a)).max(1.0),
            lane - 4.0
        );
        let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\">{}</text>", x(a) + 3.0, y + lane - 9.0, escape(label));
    };
    for (seg, sent) in reference.segments.iter().zip(&reference.sentences) {
        bar(&mut s, y, seg.start, seg.end, "#9ecae1", &sent.join(" "));
        y += lane;
    }
    for p in predictions {
        let label = format!("{} ({:.2})", p.tokens.join(" "), p.confidence);
        bar(&mut s, y, p.segment.start, p.segment.end, "#fdae6b", &label);
        y += lane;
    }
    let axis = y + 10.0;
    let _ = writeln!(
        s,
        "<line x1=\"{MARGIN}\" y1=\"{axis:.2}\" x2=\"{:.2}\" y2=\"{axis:.2}\" stroke=\"black\"/>",
        WIDTH - MARGIN
    );
    for k in 0..=10 {
        let t = duration * k as f64 / 10.0;
        let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{t:.1}</text>", x(t), axis + 16.0);
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.2}\" y=\"20\" text-anchor=\"end\">blue: ground truth, orange: predicted</text>",
        WIDTH - MARGIN
    );
    s.push_str("</svg>\n");
    s
}

/// Projection of the rows onto their two leading principal components.
pub fn pca_2d(rows: &[EmbeddingRow]) -> Result<Vec<[f64; 2]>> {
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.values.len());
    if n < 2 || d < 2 {
        return Err(Error::Validation("projection needs at least two rows of width >= 2".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| rows[i].values[j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axes = [eig.eigenvectors.column(order[0]), eig.eigenvectors.column(order[1])];
    Ok((0..n)
        .map(|i| {
            let r = centered.row(i);
            [r.dot(&axes[0].transpose()), r.dot(&axes[1].transpose())]
        })
        .collect())
}

fn view_color(v: Option<ViewLabel>) -> &'static str {
    match v {
        Some(ViewLabel::Exo) => "#1f77b4",
        Some(ViewLabel::EgoLike) => "#ff7f0e",
        Some(ViewLabel::Ego) => "#2ca02c",
        None => "#999999",
    }
}

/// Scatter of at most `max_points` rows (evenly strided), colored by view.
pub fn projection_svg(rows: &[EmbeddingRow], max_points: usize) -> Result<String> {
    let stride = rows.len().div_ceil(max_points.max(1)).max(1);
    let kept: Vec<EmbeddingRow> = rows.iter().step_by(stride).cloned().collect();
    let pts = pca_2d(&kept)?;
    let size = 640.0;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &pts {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let scale = |v: f64, k: usize| {
        let range = (hi[k] - lo[k]).max(1e-12);
        MARGIN + (size - 2.0 * MARGIN) * (v - lo[k]) / range
    };
    let mut s = header(size, size);
    for (p, r) in pts.iter().zip(&kept) {
        let _ = writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"{}\" opacity=\"0.6\"/>",
            scale(p[0], 0),
            size - scale(p[1], 1),
            view_color(r.view)
        );
    }
    let legend = [
        (Some(ViewLabel::Exo), "exo"),
        (Some(ViewLabel::EgoLike), "ego-like"),
        (Some(ViewLabel::Ego), "ego"),
    ];
    for (i, (v, name)) in legend.iter().enumerate() {
        let y = 20.0 + 16.0 * i as f64;
        let _ = writeln!(s, "<circle cx=\"20\" cy=\"{y}\" r=\"4\" fill=\"{}\"/>", view_color(*v));
        let _ = writeln!(s, "<text x=\"30\" y=\"{:.1}\">{name}</text>", y + 4.0);
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use viewdvc::data::TimeSegment;

    fn row(values: Vec<f64>) -> EmbeddingRow {
        EmbeddingRow {
            video_id: "v".into(),
            frame_index: 0,
            view: Some(ViewLabel::Exo),
            values,
        }
    }

    #[test]
    fn pca_recovers_the_dominant_axis() {
        // Points along (1, 1, 0) with a little spread along (0, 0, 1); the
        // +--+ pattern keeps the spread uncorrelated with the position.
        let rows: Vec<EmbeddingRow> = (0..20)
            .map(|i| {
                let t = i as f64 - 9.5;
                let e = if matches!(i % 4, 0 | 3) { 0.1 } else { -0.1 };
                row(vec![t, t, e])
            })
            .collect();
        let pts = pca_2d(&rows).unwrap();
        for (p, i) in pts.iter().zip(0..) {
            let t = i as f64 - 9.5;
            assert!((p[0].abs() - t.abs() * 2f64.sqrt()).abs() < 1e-9);
            assert!((p[1].abs() - 0.1).abs() < 1e-9);
        }
    }

    #[test]
    fn timeline_escapes_and_lists_every_event() {
        let reference = EventAnnotation::new(
            vec![TimeSegment::new(0.0, 4.0), TimeSegment::new(5.0, 9.0)],
            vec![vec!["a".into(), "<b>".into()], vec!["c".into()]],
            10.0,
        )
        .unwrap();
        let preds = vec![EventPrediction {
            segment: TimeSegment::new(1.0, 3.0),
            confidence: 0.5,
            tokens: vec!["a".into()],
        }];
        let svg = timeline_svg("v&1", &reference, &preds);
        assert_eq!(svg.matches("<rect").count(), 4);
        assert!(svg.contains("v&amp;1") && svg.contains("&lt;b&gt;"));
    }
}
