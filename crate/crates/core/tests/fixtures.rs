//! Checks against values recorded from the fixture corpus by
//! scripts/record_metric_fixtures.py.

mod support;

use support::{fixture_path, load_gt_proposal_fixture, MetricRecordings};
use viewdvc::captioner::assign_gt_proposals;
use viewdvc::data::{build_vocab, load_annotations, read_json, Domain};
use viewdvc::metrics::{cider, dvc_eval, read_predictions, DVC_THRESHOLDS};

#[test]
fn annotation_fixture_counts() {
    let ds = load_annotations(&fixture_path("annotations.json"), Domain::Source).unwrap();
    let counts: Vec<usize> = ds.items.iter().map(|i| i.annotation.len()).collect();
    assert_eq!(counts, vec![3, 5, 2, 4]);
    let target = load_annotations(&fixture_path("annotations.json"), Domain::Target).unwrap();
    assert!(target.items.is_empty());
}

#[test]
fn vocabulary_sizes_match_manifest() {
    let manifest: serde_json::Value = read_json(&fixture_path("manifest.json")).unwrap();
    let ds = load_annotations(&fixture_path("annotations.json"), Domain::Source).unwrap();
    // Four reserved entries precede the corpus tokens.
    let all = build_vocab(&[&ds], 1);
    assert_eq!(all.len() - 4, manifest["distinct_tokens"].as_u64().unwrap() as usize);
    let frequent = build_vocab(&[&ds], 2);
    assert_eq!(
        frequent.len() - 4,
        manifest["tokens_with_count_at_least_2"].as_u64().unwrap() as usize
    );
}

#[test]
fn dvc_eval_matches_recorded_evaluator() {
    let rec = MetricRecordings::load();
    let (preds, refs) = support::fixture_corpus();
    let r = dvc_eval(&preds, &refs, &DVC_THRESHOLDS);
    for ((thr, got), want) in r.per_threshold.iter().zip(&rec.per_threshold) {
        assert_eq!(*thr, want.0);
        assert!((got.bleu4 - want.1).abs() <= 1e-6, "BLEU4 at {thr}: {} vs {}", got.bleu4, want.1);
        assert!((got.cider - want.2).abs() <= 1e-6, "CIDEr at {thr}: {} vs {}", got.cider, want.2);
    }
    assert!((r.overall.bleu4 - rec.overall_bleu4).abs() <= 1e-6);
    assert!((r.overall.cider - rec.overall_cider).abs() <= 1e-6);
}

#[test]
fn cider_matches_recorded_evaluator() {
    let rec = MetricRecordings::load();
    let (preds, refs) = support::fixture_corpus();
    let cands: Vec<Vec<String>> = rec.cider_videos.iter().map(|v| preds[v][0].tokens.clone()).collect();
    let references: Vec<Vec<Vec<String>>> = rec.cider_videos.iter().map(|v| refs[v].sentences.clone()).collect();
    let got = cider(&cands, &references).unwrap();
    for (g, w) in got.iter().zip(&rec.cider_scores) {
        assert!((g - w).abs() <= 1e-6, "{g} vs {w}");
    }
}

#[test]
fn gt_proposal_fixture_assignments() {
    let fx = load_gt_proposal_fixture();
    assert_eq!(assign_gt_proposals(&fx.outputs, fx.duration, &fx.gt_segments), fx.expected);
}

#[test]
fn prediction_fixture_parses() {
    let preds = read_predictions(&fixture_path("predictions.json")).unwrap();
    assert_eq!(preds.len(), 4);
    assert_eq!(preds["vid_toast"].len(), 5);
}
