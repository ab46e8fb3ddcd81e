//! Oracles shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use viewdvc::autograd::{Binder, Graph, Mat, ParamStore};
use viewdvc::captioner::{denormalize, CaptionModel, LossWeights, ModelConfig, QueryOutputs};
use viewdvc::data::{
    load_annotations, read_json, tokenize, Domain, EventAnnotation, EventPrediction, TimeSegment, ViewLabel,
    Vocabulary,
};
use viewdvc::metrics::{read_predictions, tiou};
use viewdvc::viewadv::{adv_loss, grl, reinit_classifier};

/// Path of a file in the core crate's fixture directory; valid from any
/// crate of the workspace.
pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/fixtures")).join(name)
}

/// Fixture predictions and references keyed by video id.
pub fn fixture_corpus() -> (BTreeMap<String, Vec<EventPrediction>>, BTreeMap<String, EventAnnotation>) {
    let preds = read_predictions(&fixture_path("predictions.json")).unwrap();
    let refs = load_annotations(&fixture_path("annotations.json"), Domain::Source)
        .unwrap()
        .items
        .into_iter()
        .map(|i| (i.video_id, i.annotation))
        .collect();
    (preds, refs)
}

/// Values recorded from the reference evaluator.
pub struct MetricRecordings {
    /// (threshold, BLEU4, CIDEr)
    pub per_threshold: Vec<(f64, f64, f64)>,
    pub overall_bleu4: f64,
    pub overall_cider: f64,
    pub cider_videos: Vec<String>,
    pub cider_scores: Vec<f64>,
}

impl MetricRecordings {
    pub fn load() -> Self {
        let v: serde_json::Value = read_json(&fixture_path("metric_recordings.json")).unwrap();
        let dvc = &v["dvc_eval"];
        let f = |x: &serde_json::Value| x.as_f64().unwrap();
        MetricRecordings {
            per_threshold: dvc["per_threshold"]
                .as_array()
                .unwrap()
                .iter()
                .map(|r| (f(&r["threshold"]), f(&r["bleu4"]), f(&r["cider"])))
                .collect(),
            overall_bleu4: f(&dvc["overall"]["bleu4"]),
            overall_cider: f(&dvc["overall"]["cider"]),
            cider_videos: v["cider_first_prediction"]["videos"]
                .as_array()
                .unwrap()
                .iter()
                .map(|x| x.as_str().unwrap().to_string())
                .collect(),
            cider_scores: v["cider_first_prediction"]["scores"].as_array().unwrap().iter().map(f).collect(),
        }
    }
}

pub struct GtProposalFixture {
    pub duration: f64,
    pub outputs: QueryOutputs,
    pub gt_segments: Vec<TimeSegment>,
    pub expected: Vec<usize>,
}

/// Scripted query segments with hand-computed tIoU assignments. The
/// recorded tIoU values are checked here so that a typo in the fixture
/// cannot go unnoticed.
pub fn load_gt_proposal_fixture() -> GtProposalFixture {
    #[derive(serde::Deserialize)]
    struct Raw {
        duration: f64,
        queries: Vec<[f64; 2]>,
        gt_segments: Vec<[f64; 2]>,
        expected_assignment: Vec<usize>,
        expected_tiou: Vec<f64>,
    }
    let raw: Raw = read_json(&fixture_path("gt_proposals.json")).unwrap();
    let n = raw.queries.len();
    let outputs = QueryOutputs {
        segments: Array2::from_shape_fn((n, 2), |(i, j)| raw.queries[i][j]),
        fg_logits: vec![0.0; n],
        caption_logits: Array3::zeros((n, 1, 5)),
        count_logits: vec![0.0; n],
    };
    let gt_segments: Vec<TimeSegment> = raw.gt_segments.iter().map(|s| TimeSegment::new(s[0], s[1])).collect();
    for ((g, &q), &want) in gt_segments.iter().zip(&raw.expected_assignment).zip(&raw.expected_tiou) {
        let p = denormalize(raw.queries[q][0], raw.queries[q][1], raw.duration);
        assert!((tiou(&p, g) - want).abs() < 1e-12, "fixture tIoU for {g:?}");
    }
    GtProposalFixture {
        duration: raw.duration,
        outputs,
        gt_segments,
        expected: raw.expected_assignment,
    }
}

/// Every order-preserving one-to-one matching of rows `i..n` to columns
/// `j..m`, pairs in increasing order.
pub fn monotone_matchings(n: usize, m: usize, i: usize, j: usize) -> Vec<Vec<(usize, usize)>> {
    let mut out = vec![vec![]];
    for a in i..n {
        for b in j..m {
            for mut rest in monotone_matchings(n, m, a + 1, b + 1) {
                rest.insert(0, (a, b));
                out.push(rest);
            }
        }
    }
    out
}

/// Best total over all order-preserving matchings, summed in pair order.
pub fn soda_brute(s: &[Vec<f64>]) -> f64 {
    monotone_matchings(s.len(), s[0].len(), 0, 0)
        .iter()
        .map(|mt| mt.iter().fold(0.0, |acc, &(i, j)| acc + s[i][j]))
        .fold(0.0, f64::max)
}

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Cost of a pair list, summed in row order.
pub fn pair_cost(c: &Array2<f64>, pairs: &[(usize, usize)]) -> f64 {
    let mut sorted = pairs.to_vec();
    sorted.sort_unstable();
    sorted.iter().fold(0.0, |acc, &(i, j)| acc + c[[i, j]])
}

/// Minimum cost over every injective assignment of the smaller side,
/// each candidate summed in row order.
pub fn assignment_brute(c: &Array2<f64>) -> f64 {
    let (n, m) = c.dim();
    let mut best = f64::INFINITY;
    for p in permutations(n.max(m)) {
        let pairs: Vec<(usize, usize)> = if n <= m {
            (0..n).map(|i| (i, p[i])).collect()
        } else {
            (0..m).map(|j| (p[j], j)).collect()
        };
        best = best.min(pair_cost(c, &pairs));
    }
    best
}

/// Toy problem for gradient checks: d_model 8, t 16, N 4.
pub struct GradToy {
    pub model: CaptionModel,
    pub x: Mat,
    pub gt: EventAnnotation,
    pub vocab: Vocabulary,
    pub labels: Vec<ViewLabel>,
}

pub fn grad_toy(seed: u64) -> GradToy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        d_model: 8,
        n_queries: 4,
        k_max: 4,
        heads: 2,
        ffn_dim: 12,
        max_caption_len: 5,
        input_widths: vec![6],
        ..ModelConfig::default()
    };
    let vocab = Vocabulary::from_tokens(["add", "the", "salt", "stir", "pan"].map(String::from));
    let mut model = CaptionModel::new(cfg, vocab.len(), &mut rng).unwrap();
    reinit_classifier(&mut model, 2, 8, &mut rng).unwrap();
    // Move every parameter off its initial value so that no gradient is
    // trivially zero by symmetry.
    for p in model.params.params_mut() {
        p.value.mapv_inplace(|v| v + rng.gen_range(-0.05..0.05));
    }
    let x = Array2::from_shape_fn((16, 6), |_| rng.gen_range(-1.0..1.0));
    let gt = EventAnnotation::new(
        vec![TimeSegment::new(1.0, 6.0), TimeSegment::new(8.0, 15.0)],
        vec![tokenize("add the salt"), tokenize("stir the pan")],
        16.0,
    )
    .unwrap();
    let labels = (0..16)
        .map(|i| if (i / 3) % 2 == 0 { ViewLabel::Exo } else { ViewLabel::EgoLike })
        .collect();
    GradToy {
        model,
        x,
        gt,
        vocab,
        labels,
    }
}

/// Which objective a gradient check differentiates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// task_loss + adv_loss, no reversal.
    TaskPlusAdv,
    /// adv_loss alone, no reversal.
    Adv,
    /// adv_loss behind a gradient-reversal gate of strength lambda.
    ReversedAdv(f64),
}

fn evaluate(toy: &GradToy, store: &ParamStore, obj: Objective) -> (f64, Vec<Option<Mat>>) {
    let model = CaptionModel {
        params: store.clone(),
        ..toy.model.clone()
    };
    let g = Graph::new();
    let b = Binder::new(&g, &model.params);
    let out = model.forward(&b, g.constant(toy.x.clone())).unwrap();
    let root = match obj {
        Objective::TaskPlusAdv => {
            let task = model
                .task_loss(&b, &out, &toy.gt, &toy.vocab, &LossWeights::default())
                .unwrap();
            task.total.add(adv_loss(&model, &b, out.converted, &toy.labels).unwrap())
        }
        Objective::Adv => adv_loss(&model, &b, out.converted, &toy.labels).unwrap(),
        Objective::ReversedAdv(l) => adv_loss(&model, &b, grl(out.converted, l).unwrap(), &toy.labels).unwrap(),
    };
    let v = root.item();
    let grads = b.collect(&g.backward(root));
    (v, grads)
}

pub fn analytic_gradients(toy: &GradToy, obj: Objective) -> Vec<Option<Mat>> {
    evaluate(toy, &toy.model.params, obj).1
}

/// Central differences of the objective value for the named parameters.
pub fn numeric_gradients(toy: &GradToy, obj: Objective, names: &[String], h: f64) -> Vec<Mat> {
    names
        .iter()
        .map(|name| {
            let base = toy.model.params.get(name).unwrap().clone();
            let mut g = Mat::zeros(base.dim());
            let mut store = toy.model.params.clone();
            for (i, j) in ndarray::indices(base.dim()) {
                store.get_mut(name).unwrap()[[i, j]] = base[[i, j]] + h;
                let up = evaluate(toy, &store, obj).0;
                store.get_mut(name).unwrap()[[i, j]] = base[[i, j]] - h;
                let down = evaluate(toy, &store, obj).0;
                store.get_mut(name).unwrap()[[i, j]] = base[[i, j]];
                g[[i, j]] = (up - down) / (2.0 * h);
            }
            g
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` in the Frobenius norm; 0 when both vanish.
pub fn relative_error(a: &Mat, b: &Mat) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let scale = a.mapv(|v| v * v).sum().sqrt().max(b.mapv(|v| v * v).sum().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Largest per-tensor relative error between analytic gradients of
/// task_loss + adv_loss and central differences, over every parameter.
pub fn task_adv_gradient_error(seed: u64) -> (f64, String) {
    let toy = grad_toy(seed);
    let analytic = analytic_gradients(&toy, Objective::TaskPlusAdv);
    let names: Vec<String> = toy.model.params.params().iter().map(|p| p.name.clone()).collect();
    let numeric = numeric_gradients(&toy, Objective::TaskPlusAdv, &names, 1e-5);
    let mut worst = (0.0, String::new());
    for (i, name) in names.iter().enumerate() {
        let a = analytic[i].clone().unwrap_or_else(|| Mat::zeros(numeric[i].dim()));
        let e = relative_error(&a, &numeric[i]);
        if e > worst.0 || worst.1.is_empty() {
            worst = (e, name.clone());
        }
    }
    worst
}

/// Relative error between the converter gradient of the reversed
/// adversarial loss and `-lambda` times the finite-difference gradient of
/// the plain adversarial loss.
pub fn grl_composite_error(seed: u64, lambda: f64) -> f64 {
    let toy = grad_toy(seed);
    let reversed = analytic_gradients(&toy, Objective::ReversedAdv(lambda));
    let names: Vec<String> = toy
        .model
        .params
        .params()
        .iter()
        .filter(|p| p.name.starts_with("conv."))
        .map(|p| p.name.clone())
        .collect();
    assert!(!names.is_empty());
    let numeric = numeric_gradients(&toy, Objective::Adv, &names, 1e-5);
    names
        .iter()
        .zip(&numeric)
        .map(|(name, n)| {
            let i = toy.model.params.index_of(name).unwrap();
            let a = reversed[i].clone().expect("converter gradient");
            relative_error(&a, &n.mapv(|v| -lambda * v))
        })
        .fold(0.0, f64::max)
}
