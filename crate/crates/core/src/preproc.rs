//! Detection-driven preprocessing: SORT tracking of face/hand boxes, view
//! labeling from face tracks, hand-crop boxes, marker-based time
//! segmentation and hand-object mask refinement.
//!
//! Detectors, segmenters and marker recognizers are external; this module
//! only consumes their outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{SMatrix, SVector};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::captioner::hungarian_match;
use crate::data::{read_json, TimeSegment, ViewLabel};
use crate::error::{Error, Result};

/// Axis-aligned pixel box `(x1, y1, x2, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(b: [f64; 4]) -> Self {
        BBox::new(b[0], b[1], b[2], b[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite || self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(Error::Validation(format!("degenerate box {:?}", <[f64; 4]>::from(*self))));
        }
        Ok(())
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = w * h;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox::new(
            self.x1.min(other.x1),
            self.y1.min(other.y1),
            self.x2.max(other.x2),
            self.y2.max(other.y2),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetKind {
    Face,
    Hand,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub frame: usize,
    pub kind: DetKind,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        self.bbox
            .validate()
            .map_err(|e| Error::Validation(format!("frame {}: {e}", self.frame)))?;
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Validation(format!("frame {}: score {} outside [0, 1]", self.frame, self.score)));
        }
        Ok(())
    }
}

/// Reads a JSON-lines detection file and sorts it by frame.
pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut dets = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let d: Detection = serde_json::from_str(line)
            .map_err(|e| Error::parse(format!("{}:{}", path.display(), n + 1), e.to_string()))?;
        d.validate()
            .map_err(|e| Error::Validation(format!("{}:{}: {e}", path.display(), n + 1)))?;
        dets.push(d);
    }
    dets.sort_by_key(|d| d.frame);
    Ok(dets)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SortParams {
    pub iou_threshold: f64,
    pub max_age: usize,
    pub min_hits: usize,
}

impl Default for SortParams {
    fn default() -> Self {
        SortParams {
            iou_threshold: 0.3,
            max_age: 5,
            min_hits: 1,
        }
    }
}

type State = SVector<f64, 7>;
type Cov = SMatrix<f64, 7, 7>;
type Meas = SVector<f64, 4>;

/// Constant-velocity Kalman filter over `(cx, cy, area, aspect)` with
/// velocities for the first three.
#[derive(Debug, Clone)]
struct BoxKalman {
    x: State,
    p: Cov,
}

fn to_z(b: &BBox) -> Meas {
    let w = b.width();
    let h = b.height();
    Meas::new(b.x1 + w / 2.0, b.y1 + h / 2.0, w * h, w / h)
}

fn from_x(x: &State) -> BBox {
    let s = x[2].max(0.0);
    let w = (s * x[3]).max(0.0).sqrt();
    let h = if w > 0.0 { s / w } else { 0.0 };
    BBox::new(x[0] - w / 2.0, x[1] - h / 2.0, x[0] + w / 2.0, x[1] + h / 2.0)
}

impl BoxKalman {
    fn new(b: &BBox) -> Self {
        let z = to_z(b);
        let mut x = State::zeros();
        x.fixed_rows_mut::<4>(0).copy_from(&z);
        let p = Cov::from_diagonal(&State::from_column_slice(&[10.0, 10.0, 10.0, 10.0, 1e4, 1e4, 1e4]));
        BoxKalman { x, p }
    }

    fn transition() -> Cov {
        let mut f = Cov::identity();
        f[(0, 4)] = 1.0;
        f[(1, 5)] = 1.0;
        f[(2, 6)] = 1.0;
        f
    }

    fn predict(&mut self) -> BBox {
        // Keep the area from going negative.
        if self.x[2] + self.x[6] <= 0.0 {
            self.x[6] = 0.0;
        }
        let f = Self::transition();
        let q = Cov::from_diagonal(&State::from_column_slice(&[1.0, 1.0, 1.0, 1.0, 0.01, 0.01, 1e-4]));
        self.x = f * self.x;
        self.p = f * self.p * f.transpose() + q;
        from_x(&self.x)
    }

    fn update(&mut self, b: &BBox) {
        let mut h = SMatrix::<f64, 4, 7>::zeros();
        for i in 0..4 {
            h[(i, i)] = 1.0;
        }
        let r = SMatrix::<f64, 4, 4>::from_diagonal(&Meas::new(1.0, 1.0, 10.0, 10.0));
        let y = to_z(b) - h * self.x;
        let s = h * self.p * h.transpose() + r;
        let Some(s_inv) = s.try_inverse() else { return };
        let k = self.p * h.transpose() * s_inv;
        self.x += k * y;
        self.p = (Cov::identity() - k * h) * self.p;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackFrame {
    pub frame: usize,
    /// Filtered box on matched frames, predicted box otherwise.
    #[serde(rename = "box")]
    pub bbox: BBox,
    /// Detection score when matched.
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub track_id: usize,
    pub kind: DetKind,
    /// One entry per frame from the first to the last matched frame.
    pub frames: Vec<TrackFrame>,
    pub hits: usize,
}

impl Track {
    pub fn first_frame(&self) -> usize {
        self.frames.first().map_or(0, |f| f.frame)
    }

    pub fn last_frame(&self) -> usize {
        self.frames.last().map_or(0, |f| f.frame)
    }

    pub fn covers(&self, frame: usize) -> bool {
        !self.frames.is_empty() && (self.first_frame()..=self.last_frame()).contains(&frame)
    }

    pub fn at(&self, frame: usize) -> Option<&TrackFrame> {
        if !self.covers(frame) {
            return None;
        }
        self.frames.get(frame - self.first_frame())
    }
}

struct LiveTrack {
    track: Track,
    kf: BoxKalman,
    misses: usize,
    pending: Vec<TrackFrame>,
}

impl LiveTrack {
    fn finish(mut self) -> Track {
        // Trailing unmatched predictions are not part of the coverage.
        while self.track.frames.last().is_some_and(|f| f.score.is_none()) {
            self.track.frames.pop();
        }
        self.track
    }
}

// Boxes whose overlap equals the threshold up to round-off still match.
const IOU_SLACK: f64 = 1e-9;

/// SORT-style multi-object tracking. Faces and hands are tracked
/// independently; tracks with fewer than `min_hits` matches are dropped.
pub fn track_sort(detections: &[Detection], params: &SortParams) -> Vec<Track> {
    let Some(last) = detections.iter().map(|d| d.frame).max() else {
        return Vec::new();
    };
    let mut by_frame: Vec<Vec<&Detection>> = vec![Vec::new(); last + 1];
    for d in detections {
        by_frame[d.frame].push(d);
    }
    let mut next_id = 0;
    let mut live: Vec<LiveTrack> = Vec::new();
    let mut done: Vec<Track> = Vec::new();
    for (frame, dets) in by_frame.iter().enumerate() {
        let predicted: Vec<BBox> = live.iter_mut().map(|t| t.kf.predict()).collect();
        let mut matched_track = vec![None; live.len()];
        let mut matched_det = vec![false; dets.len()];
        for kind in [DetKind::Face, DetKind::Hand] {
            let ti: Vec<usize> = (0..live.len()).filter(|&i| live[i].track.kind == kind).collect();
            let di: Vec<usize> = (0..dets.len()).filter(|&j| dets[j].kind == kind).collect();
            if ti.is_empty() || di.is_empty() {
                continue;
            }
            let cost = Array2::from_shape_fn((ti.len(), di.len()), |(a, b)| -predicted[ti[a]].iou(&dets[di[b]].bbox));
            for (a, b) in hungarian_match(&cost) {
                if -cost[[a, b]] + IOU_SLACK >= params.iou_threshold {
                    matched_track[ti[a]] = Some(di[b]);
                    matched_det[di[b]] = true;
                }
            }
        }
        for (i, t) in live.iter_mut().enumerate() {
            match matched_track[i] {
                Some(j) => {
                    t.kf.update(&dets[j].bbox);
                    t.track.frames.append(&mut t.pending);
                    t.track.frames.push(TrackFrame {
                        frame,
                        bbox: from_x(&t.kf.x),
                        score: Some(dets[j].score),
                    });
                    t.track.hits += 1;
                    t.misses = 0;
                }
                None => {
                    t.misses += 1;
                    t.pending.push(TrackFrame {
                        frame,
                        bbox: predicted[i],
                        score: None,
                    });
                }
            }
        }
        let (keep, gone): (Vec<_>, Vec<_>) = live.into_iter().partition(|t| t.misses <= params.max_age);
        done.extend(gone.into_iter().map(LiveTrack::finish));
        live = keep;
        for (j, d) in dets.iter().enumerate() {
            if matched_det[j] {
                continue;
            }
            live.push(LiveTrack {
                track: Track {
                    track_id: next_id,
                    kind: d.kind,
                    frames: vec![TrackFrame {
                        frame,
                        bbox: d.bbox,
                        score: Some(d.score),
                    }],
                    hits: 1,
                },
                kf: BoxKalman::new(&d.bbox),
                misses: 0,
                pending: Vec::new(),
            });
            next_id += 1;
        }
    }
    done.extend(live.into_iter().map(LiveTrack::finish));
    let mut tracks: Vec<Track> = done.into_iter().filter(|t| t.hits >= params.min_hits.max(1)).collect();
    tracks.sort_by_key(|t| t.track_id);
    tracks
}

/// Majority filter over a centered window, truncated at the ends. Ties
/// keep the raw value.
pub fn majority_smooth(values: &[bool], window: usize) -> Vec<bool> {
    let half = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            let on = values[lo..hi].iter().filter(|&&v| v).count();
            let off = hi - lo - on;
            match on.cmp(&off) {
                std::cmp::Ordering::Greater => true,
                std::cmp::Ordering::Less => false,
                std::cmp::Ordering::Equal => values[i],
            }
        })
        .collect()
}

/// Source-domain view labels: a frame covered by a face track is exo,
/// every other frame is ego-like.
pub fn label_views(face_tracks: &[Track], num_frames: usize, smooth_window: usize) -> Vec<ViewLabel> {
    let present: Vec<bool> = (0..num_frames)
        .map(|f| face_tracks.iter().any(|t| t.kind == DetKind::Face && t.covers(f)))
        .collect();
    majority_smooth(&present, smooth_window.max(1))
        .into_iter()
        .map(|p| if p { ViewLabel::Exo } else { ViewLabel::EgoLike })
        .collect()
}

/// Per-frame square crop around the (up to two) best-scoring hands,
/// expanded by `margin` of its size on every side and clamped to the
/// frame. Frames without hands reuse the previous crop.
pub fn hand_crop_boxes(hand_tracks: &[Track], num_frames: usize, frame_size: (f64, f64), margin: f64) -> Vec<BBox> {
    let (fw, fh) = frame_size;
    let full = BBox::new(0.0, 0.0, fw, fh);
    let mut last = full;
    (0..num_frames)
        .map(|f| {
            let mut hands: Vec<(f64, BBox)> = hand_tracks
                .iter()
                .filter(|t| t.kind == DetKind::Hand)
                .filter_map(|t| t.at(f))
                .filter_map(|tf| tf.score.map(|s| (s, tf.bbox)))
                .collect();
            hands.sort_by(|a, b| b.0.total_cmp(&a.0));
            let Some(u) = hands.iter().take(2).map(|h| h.1).reduce(|a, b| a.union(&b)) else {
                return last;
            };
            let (mx, my) = (margin * u.width(), margin * u.height());
            let mut c = BBox::new(u.x1 - mx, u.y1 - my, u.x2 + mx, u.y2 + my);
            let side = c.width().max(c.height());
            let (cx, cy) = ((c.x1 + c.x2) / 2.0, (c.y1 + c.y2) / 2.0);
            c = BBox::new(cx - side / 2.0, cy - side / 2.0, cx + side / 2.0, cy + side / 2.0);
            let clamped = BBox::new(c.x1.max(0.0), c.y1.max(0.0), c.x2.min(fw), c.y2.min(fh));
            // Hands entirely outside the frame count as no hands.
            if clamped.validate().is_ok() {
                last = clamped;
            }
            last
        })
        .collect()
}

/// Maximal runs of `true` as half-open frame ranges.
fn bursts(present: &[bool]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &p) in present.iter().chain(std::iter::once(&false)).enumerate() {
        match (p, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    runs
}

/// Step segments from on-screen marker detections: runs shorter than
/// `debounce` frames are dropped, and each surviving burst opens a step
/// lasting until the next burst (or the end of the video).
pub fn segment_by_markers(present: &[bool], fps: f64, debounce: usize) -> Result<Vec<TimeSegment>> {
    if !(fps > 0.0) {
        return Err(Error::Validation(format!("fps must be > 0, got {fps}")));
    }
    let runs: Vec<(usize, usize)> = bursts(present)
        .into_iter()
        .filter(|(s, e)| e - s >= debounce)
        .collect();
    if runs.is_empty() {
        return Err(Error::Validation("no markers found".into()));
    }
    let mut segs = Vec::with_capacity(runs.len());
    for (i, &(_, end)) in runs.iter().enumerate() {
        let next = runs.get(i + 1).map_or(present.len(), |r| r.0);
        if next <= end {
            return Err(Error::Validation(format!(
                "degenerate segmentation: marker burst ending at frame {end} leaves an empty step"
            )));
        }
        segs.push(TimeSegment::new(end as f64 / fps, next as f64 / fps));
    }
    Ok(segs)
}

/// Reads a marker file: either per-frame booleans or the indices of
/// positive frames (then `num_frames` sets the length).
pub fn read_markers(path: &Path, num_frames: Option<usize>) -> Result<Vec<bool>> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Markers {
        Flags(Vec<bool>),
        Indices(Vec<usize>),
    }
    match read_json::<Markers>(path)? {
        Markers::Flags(f) => Ok(f),
        Markers::Indices(idx) => {
            let n = num_frames
                .or_else(|| idx.iter().max().map(|m| m + 1))
                .unwrap_or(0);
            if let Some(bad) = idx.iter().find(|&&i| i >= n) {
                return Err(Error::Validation(format!("{}: marker frame {bad} beyond {n} frames", path.display())));
            }
            let mut f = vec![false; n];
            for i in idx {
                f[i] = true;
            }
            Ok(f)
        }
    }
}

/// Binary mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Mask { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    fn check_same(&self, other: &Mask) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::Shape(format!(
                "mask resolution {}x{} differs from {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn intersection_area(&self, other: &Mask) -> Result<usize> {
        self.check_same(other)?;
        Ok(self.data.iter().zip(&other.data).filter(|(a, b)| **a && **b).count())
    }

    /// Tight pixel bounding box, `None` for an empty mask.
    pub fn bounding_box(&self) -> Option<BBox> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    b = Some(match b {
                        None => (x, y, x, y),
                        Some((x1, y1, x2, y2)) => (x1.min(x), y1.min(y), x2.max(x), y2.max(y)),
                    });
                }
            }
        }
        b.map(|(x1, y1, x2, y2)| BBox::new(x1 as f64, y1 as f64, (x2 + 1) as f64, (y2 + 1) as f64))
    }

    /// Run lengths over the row-major pixels, starting with a run of zeros.
    pub fn to_rle(&self) -> Rle {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0;
        for &v in &self.data {
            if v != current {
                counts.push(run);
                current = v;
                run = 0;
            }
            run += 1;
        }
        counts.push(run);
        Rle { counts }
    }

    pub fn from_rle(width: usize, height: usize, rle: &Rle) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for (i, &c) in rle.counts.iter().enumerate() {
            data.extend(std::iter::repeat_n(i % 2 == 1, c));
        }
        if data.len() != width * height {
            return Err(Error::Validation(format!(
                "run-length mask covers {} pixels, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Mask { width, height, data })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub counts: Vec<usize>,
}

/// Category mask `m` replaced by the proposal it overlaps most, when that
/// overlap covers at least `min_overlap_ratio` of `m`. Ties go to the
/// earliest proposal.
pub fn refine_masks(m: &Mask, proposals: &[Mask], min_overlap_ratio: f64) -> Result<Mask> {
    for p in proposals {
        m.check_same(p)?;
    }
    let area = m.area();
    if area == 0 {
        return Ok(m.clone());
    }
    let mut best: Option<(usize, usize)> = None;
    for (j, p) in proposals.iter().enumerate() {
        let inter = m.intersection_area(p)?;
        if best.is_none_or(|(_, b)| inter > b) {
            best = Some((j, inter));
        }
    }
    match best {
        Some((j, inter)) if inter > 0 && inter as f64 / area as f64 >= min_overlap_ratio => Ok(proposals[j].clone()),
        _ => Ok(m.clone()),
    }
}

/// Hand-object masks of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub hands: Mask,
    pub obj1: Mask,
    pub obj2: Mask,
    pub proposals: Vec<Mask>,
}

impl MaskSet {
    /// Each interaction mask refined against the generic proposals.
    pub fn refined(&self, min_overlap_ratio: f64) -> Result<MaskSet> {
        Ok(MaskSet {
            hands: refine_masks(&self.hands, &self.proposals, min_overlap_ratio)?,
            obj1: refine_masks(&self.obj1, &self.proposals, min_overlap_ratio)?,
            obj2: refine_masks(&self.obj2, &self.proposals, min_overlap_ratio)?,
            proposals: self.proposals.clone(),
        })
    }
}

/// On-disk mask container: per-frame run-length masks keyed by category
/// (`hands`, `obj1`, `obj2`, `proposal_<k>`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskFile {
    pub width: usize,
    pub height: usize,
    pub frames: Vec<BTreeMap<String, Rle>>,
}

impl MaskFile {
    pub fn from_sets(width: usize, height: usize, sets: &[MaskSet]) -> Self {
        let frames = sets
            .iter()
            .map(|s| {
                let mut m = BTreeMap::new();
                m.insert("hands".to_string(), s.hands.to_rle());
                m.insert("obj1".to_string(), s.obj1.to_rle());
                m.insert("obj2".to_string(), s.obj2.to_rle());
                for (k, p) in s.proposals.iter().enumerate() {
                    m.insert(format!("proposal_{k}"), p.to_rle());
                }
                m
            })
            .collect();
        MaskFile { width, height, frames }
    }

    /// Decodes every frame; missing categories are empty masks.
    pub fn to_sets(&self) -> Result<Vec<MaskSet>> {
        let (w, h) = (self.width, self.height);
        self.frames
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let get = |k: &str| match f.get(k) {
                    Some(r) => Mask::from_rle(w, h, r).map_err(|e| Error::Validation(format!("frame {i} {k}: {e}"))),
                    None => Ok(Mask::empty(w, h)),
                };
                let mut proposals: Vec<(usize, Mask)> = Vec::new();
                for (k, r) in f {
                    if let Some(idx) = k.strip_prefix("proposal_") {
                        let idx: usize = idx
                            .parse()
                            .map_err(|_| Error::Validation(format!("frame {i}: bad mask label {k:?}")))?;
                        proposals.push((idx, Mask::from_rle(w, h, r)?));
                    } else if !["hands", "obj1", "obj2"].contains(&k.as_str()) {
                        return Err(Error::Validation(format!("frame {i}: unknown mask label {k:?}")));
                    }
                }
                proposals.sort_by_key(|p| p.0);
                Ok(MaskSet {
                    hands: get("hands")?,
                    obj1: get("obj1")?,
                    obj2: get("obj2")?,
                    proposals: proposals.into_iter().map(|p| p.1).collect(),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(frame: usize, kind: DetKind, b: [f64; 4]) -> Detection {
        Detection {
            frame,
            kind,
            bbox: b.into(),
            score: 0.9,
        }
    }

    #[test]
    fn static_box_one_track() {
        let dets: Vec<_> = (0..10).map(|f| det(f, DetKind::Face, [10.0, 10.0, 50.0, 40.0])).collect();
        let tracks = track_sort(&dets, &SortParams::default());
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].frames.len(), 10);
        assert_eq!((tracks[0].first_frame(), tracks[0].last_frame()), (0, 9));
    }

    #[test]
    fn separated_boxes_two_tracks() {
        let dets: Vec<_> = (0..10)
            .flat_map(|f| {
                [
                    det(f, DetKind::Hand, [0.0, 0.0, 10.0, 10.0]),
                    det(f, DetKind::Hand, [50.0, 50.0, 60.0, 60.0]),
                ]
            })
            .collect();
        let tracks = track_sort(&dets, &SortParams::default());
        assert_eq!(tracks.len(), 2);
        assert!(tracks.iter().all(|t| t.frames.len() == 10));
    }

    #[test]
    fn kinds_never_share_a_track() {
        let dets: Vec<_> = (0..4)
            .map(|f| det(f, if f % 2 == 0 { DetKind::Face } else { DetKind::Hand }, [0.0, 0.0, 10.0, 10.0]))
            .collect();
        let tracks = track_sort(&dets, &SortParams::default());
        assert_eq!(tracks.len(), 2);
        assert_eq!(tracks[0].kind, DetKind::Face);
        assert_eq!(tracks[0].frames.len(), 3);
        assert_eq!(tracks[0].frames[1].score, None);
    }

    #[test]
    fn track_ends_after_max_age_misses() {
        let mut dets: Vec<_> = (0..3).map(|f| det(f, DetKind::Face, [0.0, 0.0, 10.0, 10.0])).collect();
        dets.push(det(10, DetKind::Face, [0.0, 0.0, 10.0, 10.0]));
        let tracks = track_sort(&dets, &SortParams::default());
        assert_eq!(tracks.len(), 2);
        let p = SortParams { max_age: 7, ..SortParams::default() };
        let tracks = track_sort(&dets, &p);
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].frames.len(), 11);
        let p = SortParams { min_hits: 2, ..SortParams::default() };
        assert_eq!(track_sort(&dets, &p).len(), 1);
    }

    /// Identity chaining by maximum total IoU with the previous frame's
    /// boxes, over all assignments of at most two boxes.
    fn brute_force_ids(frames: &[Vec<BBox>]) -> Vec<Vec<usize>> {
        let mut ids = vec![(0..frames[0].len()).collect::<Vec<_>>()];
        for f in 1..frames.len() {
            let prev = &frames[f - 1];
            let cur = &frames[f];
            let score = |perm: &[usize]| -> f64 { perm.iter().enumerate().map(|(i, &j)| prev[j].iou(&cur[i])).sum() };
            let perms: Vec<Vec<usize>> = if cur.len() == 2 { vec![vec![0, 1], vec![1, 0]] } else { vec![vec![0]] };
            let best = perms
                .into_iter()
                .max_by(|a, b| score(a).total_cmp(&score(b)))
                .unwrap();
            ids.push(best.iter().map(|&j| ids[f - 1][j]).collect());
        }
        ids
    }

    #[test]
    fn crossing_boxes_match_brute_force() {
        // Two boxes passing each other horizontally with a vertical offset.
        let frames: Vec<Vec<BBox>> = (0..6)
            .map(|f| {
                let x = f as f64 * 6.0;
                vec![
                    BBox::new(x, 0.0, x + 20.0, 20.0),
                    BBox::new(30.0 - x, 8.0, 50.0 - x, 28.0),
                ]
            })
            .collect();
        let dets: Vec<Detection> = frames
            .iter()
            .enumerate()
            .flat_map(|(f, bs)| bs.iter().map(move |b| det(f, DetKind::Hand, (*b).into())))
            .collect();
        let tracks = track_sort(&dets, &SortParams { iou_threshold: 0.1, ..SortParams::default() });
        assert_eq!(tracks.len(), 2);
        let oracle = brute_force_ids(&frames);
        for (f, bs) in frames.iter().enumerate() {
            for (k, b) in bs.iter().enumerate() {
                // The track whose matched box is closest to this detection.
                let owner = tracks
                    .iter()
                    .max_by(|x, y| {
                        let i = |t: &Track| t.at(f).map_or(0.0, |tf| tf.bbox.iou(b));
                        i(x).total_cmp(&i(y))
                    })
                    .unwrap();
                assert_eq!(owner.track_id, oracle[f][k], "frame {f} box {k}");
            }
        }
    }

    #[test]
    fn label_view_examples() {
        let face = |n: usize| Track {
            track_id: 0,
            kind: DetKind::Face,
            frames: (0..n)
                .map(|f| TrackFrame {
                    frame: f,
                    bbox: BBox::new(0.0, 0.0, 1.0, 1.0),
                    score: Some(1.0),
                })
                .collect(),
            hits: n,
        };
        assert_eq!(label_views(&[face(8)], 8, 9), vec![ViewLabel::Exo; 8]);
        assert_eq!(label_views(&[], 5, 9), vec![ViewLabel::EgoLike; 5]);
        assert_eq!(majority_smooth(&[true, true, false, true, true], 3), vec![true; 5]);
        assert_eq!(
            majority_smooth(&[false, false, true, false, false], 3),
            vec![false; 5]
        );
    }

    fn hand(id: usize, frame: usize, b: [f64; 4], score: f64) -> Track {
        Track {
            track_id: id,
            kind: DetKind::Hand,
            frames: vec![TrackFrame {
                frame,
                bbox: b.into(),
                score: Some(score),
            }],
            hits: 1,
        }
    }

    #[test]
    fn crop_examples() {
        let crops = hand_crop_boxes(&[hand(0, 0, [10.0, 10.0, 20.0, 20.0], 0.9)], 2, (100.0, 100.0), 0.0);
        assert_eq!(crops, vec![BBox::new(10.0, 10.0, 20.0, 20.0); 2]);
        let crops = hand_crop_boxes(&[], 3, (100.0, 100.0), 0.25);
        assert_eq!(crops, vec![BBox::new(0.0, 0.0, 100.0, 100.0); 3]);
        let two = [hand(0, 0, [0.0, 0.0, 10.0, 10.0], 0.9), hand(1, 0, [30.0, 30.0, 40.0, 40.0], 0.8)];
        let crops = hand_crop_boxes(&two, 1, (100.0, 100.0), 0.1);
        assert!((crops[0].x2 - 44.0).abs() < 1e-12 && (crops[0].y2 - 44.0).abs() < 1e-12);
        assert_eq!((crops[0].x1, crops[0].y1), (0.0, 0.0));
        // A third, weaker hand is ignored.
        let three = [two[0].clone(), two[1].clone(), hand(2, 0, [80.0, 80.0, 90.0, 90.0], 0.1)];
        assert_eq!(hand_crop_boxes(&three, 1, (100.0, 100.0), 0.1), crops);
    }

    #[test]
    fn marker_examples() {
        let (t, f) = (true, false);
        let segs = segment_by_markers(&[f, t, f, f, t, f, f], 1.0, 1).unwrap();
        assert_eq!(segs, vec![TimeSegment::new(2.0, 4.0), TimeSegment::new(5.0, 7.0)]);
        let err = segment_by_markers(&[t; 7], 1.0, 1).unwrap_err();
        assert!(err.to_string().contains("degenerate segmentation"));
        let segs = segment_by_markers(&[f, t, f, f, t, t, f], 1.0, 2).unwrap();
        assert_eq!(segs, vec![TimeSegment::new(6.0, 7.0)]);
        let err = segment_by_markers(&[f, f], 1.0, 1).unwrap_err();
        assert!(err.to_string().contains("no markers found"));
        assert!(segment_by_markers(&[t, f], 0.0, 1).is_err());
        let segs = segment_by_markers(&[t, f, f, f], 2.0, 1).unwrap();
        assert_eq!(segs, vec![TimeSegment::new(0.5, 2.0)]);
    }

    fn rect(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Mask {
        Mask::from_fn(w, h, |x, y| (x0..x1).contains(&x) && (y0..y1).contains(&y))
    }

    #[test]
    fn refine_examples() {
        let m = rect(20, 20, 0, 0, 10, 10);
        assert_eq!(m.area(), 100);
        let exact = [rect(20, 20, 15, 15, 20, 20), m.clone()];
        assert_eq!(refine_masks(&m, &exact, 0.5).unwrap(), m);
        let disjoint = [rect(20, 20, 12, 12, 20, 20)];
        assert_eq!(refine_masks(&m, &disjoint, 0.0).unwrap(), m);
        // Overlaps of 30 and 80 pixels.
        let p30 = rect(20, 20, 7, 0, 12, 10);
        let p80 = rect(20, 20, 0, 2, 10, 12);
        assert_eq!(m.intersection_area(&p30).unwrap(), 30);
        assert_eq!(m.intersection_area(&p80).unwrap(), 80);
        assert_eq!(refine_masks(&m, &[p30.clone(), p80.clone()], 0.5).unwrap(), p80);
        assert_eq!(refine_masks(&m, std::slice::from_ref(&p30), 0.5).unwrap(), m);
        assert_eq!(refine_masks(&Mask::empty(20, 20), &[p30], 0.0).unwrap(), Mask::empty(20, 20));
        assert!(refine_masks(&m, &[Mask::empty(5, 5)], 0.5).is_err());
    }

    #[test]
    fn mask_file_round_trip() {
        let set = MaskSet {
            hands: rect(6, 4, 0, 0, 2, 2),
            obj1: rect(6, 4, 3, 1, 6, 4),
            obj2: Mask::empty(6, 4),
            proposals: vec![rect(6, 4, 0, 0, 6, 1), rect(6, 4, 1, 1, 2, 2)],
        };
        let file = MaskFile::from_sets(6, 4, std::slice::from_ref(&set));
        let text = serde_json::to_string(&file).unwrap();
        let back: MaskFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_sets().unwrap(), vec![set]);
        assert_eq!(rect(6, 4, 1, 1, 3, 3).bounding_box(), Some(BBox::new(1.0, 1.0, 3.0, 3.0)));
    }

    #[test]
    fn detection_line_format() {
        let d: Detection = serde_json::from_str(r#"{"frame":3,"kind":"hand","box":[1,2,3,4],"score":0.5}"#).unwrap();
        assert_eq!(d, det(3, DetKind::Hand, [1.0, 2.0, 3.0, 4.0]).with_score(0.5));
        assert!(det(0, DetKind::Face, [3.0, 0.0, 1.0, 1.0]).validate().is_err());
    }

    impl Detection {
        fn with_score(mut self, s: f64) -> Self {
            self.score = s;
            self
        }
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..100.0f64, 0.0..100.0f64, 1.0..50.0f64, 1.0..50.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn static_box_is_one_track_for_any_threshold(b in arb_box(), thr in 0.0..0.999_999f64, n in 1usize..15) {
            let dets: Vec<_> = (0..n).map(|f| det(f, DetKind::Face, b.into())).collect();
            let tracks = track_sort(&dets, &SortParams { iou_threshold: thr, ..SortParams::default() });
            prop_assert_eq!(tracks.len(), 1);
            prop_assert_eq!(tracks[0].frames.len(), n);
        }

        #[test]
        fn labels_cover_every_frame(pattern in proptest::collection::vec(any::<bool>(), 0..40), w in 1usize..12) {
            let tracks: Vec<Track> = pattern
                .iter()
                .enumerate()
                .filter(|(_, &p)| p)
                .map(|(f, _)| Track {
                    track_id: f,
                    kind: DetKind::Face,
                    frames: vec![TrackFrame { frame: f, bbox: BBox::new(0.0, 0.0, 1.0, 1.0), score: Some(1.0) }],
                    hits: 1,
                })
                .collect();
            let labels = label_views(&tracks, pattern.len(), w);
            prop_assert_eq!(labels.len(), pattern.len());
            prop_assert!(labels.iter().all(|l| matches!(l, ViewLabel::Exo | ViewLabel::EgoLike)));
        }

        #[test]
        fn marker_segments_are_ordered_and_avoid_bursts(
            pattern in proptest::collection::vec(any::<bool>(), 1..40),
            debounce in 1usize..4,
        ) {
            if let Ok(segs) = segment_by_markers(&pattern, 1.0, debounce) {
                for w in segs.windows(2) {
                    prop_assert!(w[0].end <= w[1].start);
                }
                let kept: Vec<_> = bursts(&pattern).into_iter().filter(|(s, e)| e - s >= debounce).collect();
                for s in &segs {
                    prop_assert!(s.start < s.end);
                    for &(b0, b1) in &kept {
                        prop_assert!(s.end <= b0 as f64 || s.start >= b1 as f64);
                    }
                }
            }
        }

        #[test]
        fn refined_mask_overlaps_input(
            bits in proptest::collection::vec(any::<bool>(), 64),
            props in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 64), 0..4),
            ratio in 0.0..1.0f64,
        ) {
            let m = Mask { width: 8, height: 8, data: bits };
            let ps: Vec<Mask> = props.into_iter().map(|d| Mask { width: 8, height: 8, data: d }).collect();
            let r = refine_masks(&m, &ps, ratio).unwrap();
            if !m.is_empty() {
                prop_assert!(m.intersection_area(&r).unwrap() > 0);
            }
            prop_assert_eq!(Mask::from_rle(8, 8, &m.to_rle()).unwrap(), m);
        }

        #[test]
        fn crops_stay_in_frame(boxes in proptest::collection::vec(arb_box(), 0..4), margin in 0.0..0.5f64) {
            let tracks: Vec<Track> = boxes.iter().enumerate().map(|(i, b)| hand(i, 0, (*b).into(), 0.5)).collect();
            for c in hand_crop_boxes(&tracks, 2, (120.0, 90.0), margin) {
                prop_assert!(c.x1 >= 0.0 && c.y1 >= 0.0 && c.x2 <= 120.0 && c.y2 <= 90.0);
                prop_assert!(c.x1 < c.x2 && c.y1 < c.y2);
            }
        }
    }
}
