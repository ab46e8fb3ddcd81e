//! Synthetic two-domain corpus with a controllable view gap.
//!
//! Each video is a sequence of steps captioned "verb the noun". A frame of a
//! step carries the sum of the verb and noun embeddings plus noise; frames
//! between steps carry a background embedding. Every frame is then moved by
//! the affine transform of its view. Source videos alternate exo and
//! ego-like shots inside each step; target videos are all ego and carry
//! extra per-frame motion noise.
//!
//! The three view transforms share one direction `u`: exo sits at `-g*u`,
//! ego-like at `+g/2*u` and ego at `+3g/2*u` plus `g/2*w` for a second
//! direction `w` orthogonal to `u`, where `g` is the gap severity. Each
//! transform also stretches the `u` axis by a view-specific factor. With
//! `g = 0` all three are the identity.
//!
//! Target frames can also shake along `w`: one Gaussian draw per frame and
//! block, with std `camera_shake * g`, so it too vanishes at zero gap.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Adam, Binder, Graph, ParamGroup, ParamStore};
use crate::data::{
    DatasetItem, Domain, EventAnnotation, LabeledDataset, Representation, Split, TimeSegment, VideoFeatures,
    ViewLabel,
};
use crate::error::{Error, Result};
use crate::viewadv::balance_views;

const VERBS: [&str; 12] = [
    "cut", "add", "stir", "pour", "peel", "mix", "fry", "wash", "boil", "chop", "slice", "season",
];
const NOUNS: [&str; 12] = [
    "onion", "salt", "egg", "rice", "carrot", "oil", "pepper", "tomato", "garlic", "flour", "butter", "noodle",
];

/// Noise scale of the stabilized crop relative to the full frame.
const CROP_MOTION: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub verbs: usize,
    pub nouns: usize,
    pub source_videos: usize,
    pub target_videos: usize,
    /// Fraction of each domain's videos held out for evaluation.
    pub eval_fraction: f64,
    pub min_steps: usize,
    pub max_steps: usize,
    /// Feature width `d` of one block.
    pub width: usize,
    pub min_step_frames: usize,
    pub max_step_frames: usize,
    pub max_gap_frames: usize,
    pub min_shot_frames: usize,
    pub max_shot_frames: usize,
    pub feature_noise: f64,
    pub view_gap: f64,
    pub motion_noise: f64,
    /// Std of the per-frame target jitter along `w`, in units of the gap.
    pub camera_shake: f64,
    pub target_representation: Representation,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            verbs: 6,
            nouns: 6,
            source_videos: 40,
            target_videos: 16,
            eval_fraction: 0.25,
            min_steps: 3,
            max_steps: 8,
            width: 32,
            min_step_frames: 6,
            max_step_frames: 12,
            max_gap_frames: 3,
            min_shot_frames: 2,
            max_shot_frames: 4,
            feature_noise: 0.5,
            view_gap: 3.0,
            motion_noise: 1.0,
            camera_shake: 0.0,
            target_representation: Representation::V,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("invalid synthetic config: {m}")));
        if self.verbs == 0 || self.nouns == 0 || self.width == 0 {
            return bad("vocabulary sizes and width must be >= 1");
        }
        if self.source_videos == 0 || self.target_videos == 0 {
            return bad("video counts must be >= 1");
        }
        if self.min_steps == 0 || self.min_steps > self.max_steps {
            return bad("need 1 <= min_steps <= max_steps");
        }
        if self.min_step_frames == 0 || self.min_step_frames > self.max_step_frames {
            return bad("need 1 <= min_step_frames <= max_step_frames");
        }
        if self.min_shot_frames == 0 || self.min_shot_frames > self.max_shot_frames {
            return bad("need 1 <= min_shot_frames <= max_shot_frames");
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return bad("eval_fraction must be in [0, 1)");
        }
        if !(self.view_gap >= 0.0 && self.motion_noise >= 0.0 && self.feature_noise >= 0.0 && self.camera_shake >= 0.0) {
            return bad("noise and gap scales must be >= 0");
        }
        Ok(())
    }
}

/// Word embeddings and view geometry shared by all videos of a corpus.
struct World {
    verb_emb: Array2<f64>,
    noun_emb: Array2<f64>,
    background: Array1<f64>,
    u: Array1<f64>,
    w: Array1<f64>,
}

fn normal_vec(n: usize, rng: &mut impl Rng) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| StandardNormal.sample(rng))
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    v / n
}

impl World {
    fn new(cfg: &SynthConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.width;
        let verb_emb = Array2::from_shape_fn((cfg.verbs, d), |_| StandardNormal.sample(rng));
        let noun_emb = Array2::from_shape_fn((cfg.nouns, d), |_| StandardNormal.sample(rng));
        let background = normal_vec(d, rng) * 0.5;
        let u = unit(normal_vec(d, rng));
        let w = if d > 1 {
            let raw = normal_vec(d, rng);
            unit(&raw - &(&u * raw.dot(&u)))
        } else {
            Array1::zeros(d)
        };
        World {
            verb_emb,
            noun_emb,
            background,
            u,
            w,
        }
    }

    /// Applies the affine transform of `view` at gap severity `gap`.
    fn transform(&self, x: ArrayView1<f64>, view: ViewLabel, gap: f64) -> Array1<f64> {
        let (shift_u, shift_w, stretch) = match view {
            ViewLabel::Exo => (-gap, 0.0, 0.0),
            ViewLabel::EgoLike => (0.5 * gap, 0.0, 0.1 * gap),
            ViewLabel::Ego => (1.5 * gap, 0.5 * gap, 0.2 * gap),
        };
        let along = x.dot(&self.u);
        &x + &(&self.u * (stretch * along + shift_u)) + &(&self.w * shift_w)
    }
}

fn verb_word(i: usize) -> String {
    VERBS.get(i).map_or_else(|| format!("verb{i}"), |s| s.to_string())
}

fn noun_word(i: usize) -> String {
    NOUNS.get(i).map_or_else(|| format!("noun{i}"), |s| s.to_string())
}

/// Frame content before any view transform.
enum Content {
    Background,
    Step { verb: usize, noun: usize },
}

struct RawVideo {
    contents: Vec<Content>,
    views: Vec<ViewLabel>,
    annotation: EventAnnotation,
}

fn layout(cfg: &SynthConfig, domain: Domain, rng: &mut impl Rng) -> Result<RawVideo> {
    let steps = rng.gen_range(cfg.min_steps..=cfg.max_steps);
    let mut contents = Vec::new();
    let mut segments = Vec::new();
    let mut sentences = Vec::new();
    let mut gap = || rng.gen_range(0..=cfg.max_gap_frames);
    let mut layout_steps = Vec::with_capacity(steps);
    for _ in 0..steps {
        layout_steps.push(gap());
    }
    let tail = gap();
    for before in layout_steps {
        contents.extend((0..before).map(|_| Content::Background));
        let len = rng.gen_range(cfg.min_step_frames..=cfg.max_step_frames);
        let verb = rng.gen_range(0..cfg.verbs);
        let noun = rng.gen_range(0..cfg.nouns);
        let start = contents.len() as f64;
        segments.push(TimeSegment::new(start, start + len as f64));
        sentences.push(vec![verb_word(verb), "the".to_string(), noun_word(noun)]);
        contents.extend((0..len).map(|_| Content::Step { verb, noun }));
    }
    contents.extend((0..tail).map(|_| Content::Background));
    let duration = contents.len() as f64;

    let views = match domain {
        Domain::Target => vec![ViewLabel::Ego; contents.len()],
        Domain::Source => {
            // Shots restart at every step boundary so each step alternates
            // views from its first frame.
            let mut views = Vec::with_capacity(contents.len());
            let mut boundaries: Vec<usize> = segments.iter().map(|s| s.start as usize).collect();
            boundaries.extend(segments.iter().map(|s| s.end as usize));
            boundaries.sort_unstable();
            let mut view = if rng.gen_bool(0.5) { ViewLabel::Exo } else { ViewLabel::EgoLike };
            let mut left = 0usize;
            for i in 0..contents.len() {
                if left == 0 || boundaries.binary_search(&i).is_ok() {
                    if i > 0 {
                        view = if view == ViewLabel::Exo { ViewLabel::EgoLike } else { ViewLabel::Exo };
                    }
                    left = rng.gen_range(cfg.min_shot_frames..=cfg.max_shot_frames);
                }
                views.push(view);
                left -= 1;
            }
            views
        }
    };
    Ok(RawVideo {
        contents,
        views,
        annotation: EventAnnotation::new(segments, sentences, duration)?,
    })
}

fn render(cfg: &SynthConfig, world: &World, raw: &RawVideo, domain: Domain, rng: &mut impl Rng) -> Array2<f64> {
    let d = cfg.width;
    let repr = match domain {
        Domain::Source => Representation::V,
        Domain::Target => cfg.target_representation,
    };
    let mut out = Array2::zeros((raw.contents.len(), d * repr.blocks()));
    for (i, (content, &view)) in raw.contents.iter().zip(&raw.views).enumerate() {
        let noise = normal_vec(d, rng) * cfg.feature_noise;
        let base = match content {
            Content::Background => &world.background + &noise,
            Content::Step { verb, noun } => &world.verb_emb.row(*verb) + &world.noun_emb.row(*noun) + &noise,
        };
        let mut blocks = vec![world.transform(base.view(), view, cfg.view_gap)];
        if repr == Representation::VcHo {
            let (hands, obj1, obj2) = match content {
                Content::Background => (normal_vec(d, rng) * cfg.feature_noise, Array1::zeros(d), Array1::zeros(d)),
                Content::Step { verb, noun } => {
                    let n1 = normal_vec(d, rng) * (0.5 * cfg.feature_noise);
                    let n2 = normal_vec(d, rng) * (0.5 * cfg.feature_noise);
                    let n3 = normal_vec(d, rng) * cfg.feature_noise;
                    (
                        &world.verb_emb.row(*verb) + &n1,
                        &world.noun_emb.row(*noun) + &n2,
                        &world.noun_emb.row(*noun) * 0.5 + &n3,
                    )
                }
            };
            for region in [hands, obj1, obj2] {
                blocks.push(world.transform(region.view(), view, cfg.view_gap));
            }
        }
        let motion = match (domain, repr) {
            (Domain::Source, _) => 0.0,
            (Domain::Target, Representation::V) => cfg.motion_noise,
            (Domain::Target, _) => cfg.motion_noise * CROP_MOTION,
        };
        let mut row = out.row_mut(i);
        let shake = if domain == Domain::Target { cfg.camera_shake * cfg.view_gap } else { 0.0 };
        for (k, block) in blocks.into_iter().enumerate() {
            let mut jitter = normal_vec(d, rng) * motion;
            if shake > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                jitter = jitter + &world.w * (z * shake);
            }
            row.slice_mut(ndarray::s![k * d..(k + 1) * d]).assign(&(block + jitter));
        }
    }
    out
}

fn video_rng(seed: u64, domain: Domain, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stream = match domain {
        Domain::Source => 1u64 << 32,
        Domain::Target => 2u64 << 32,
    };
    rng.set_stream(stream + index as u64);
    rng
}

fn gen_domain(cfg: &SynthConfig, world: &World, domain: Domain) -> Result<LabeledDataset> {
    let (count, prefix) = match domain {
        Domain::Source => (cfg.source_videos, "src"),
        Domain::Target => (cfg.target_videos, "tgt"),
    };
    let n_eval = ((count as f64) * cfg.eval_fraction).round() as usize;
    let n_eval = n_eval.min(count.saturating_sub(1));
    let mut items = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = video_rng(cfg.seed, domain, i);
        let raw = layout(cfg, domain, &mut rng)?;
        let frames = render(cfg, world, &raw, domain, &mut rng);
        let timestamps = (0..frames.nrows()).map(|j| j as f64).collect();
        items.push(DatasetItem {
            video_id: format!("{prefix}{i:04}"),
            split: if i >= count - n_eval { Split::Eval } else { Split::Train },
            annotation: raw.annotation,
            features: Some(VideoFeatures { frames, timestamps }),
            views: Some(raw.views),
        });
    }
    LabeledDataset::new(domain, items)
}

/// Generates the (source, target) corpus at one frame per second.
pub fn gen_synthetic_corpus(cfg: &SynthConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let world = World::new(cfg, &mut rng);
    Ok((gen_domain(cfg, &world, Domain::Source)?, gen_domain(cfg, &world, Domain::Target)?))
}

/// Held-out accuracy of a softmax-regression probe predicting `labels`
/// from rows of `x`. Classes are balanced first; 70% of the rows train the
/// probe on standardized features and the rest measure accuracy.
pub fn linear_probe(x: &Array2<f64>, labels: &[ViewLabel], seed: u64) -> Result<f64> {
    if x.nrows() != labels.len() {
        return Err(Error::Shape(format!("{} rows but {} labels", x.nrows(), labels.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = balance_views(labels, &mut rng);
    idx.shuffle(&mut rng);
    idx.truncate(6000);
    let mut classes: Vec<ViewLabel> = idx.iter().map(|&i| labels[i]).collect();
    classes.sort();
    classes.dedup();
    if classes.len() < 2 || idx.len() < 10 {
        return Err(Error::Validation("probe needs at least two view classes with frames".into()));
    }
    let split = idx.len() * 7 / 10;
    let (train, test) = idx.split_at(split);
    let train_x = x.select(Axis(0), train);
    let mean = train_x.mean_axis(Axis(0)).expect("non-empty");
    let std = train_x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let standardize = |m: Array2<f64>| (m - &mean) / &std;
    let train_x = standardize(train_x);
    let test_x = standardize(x.select(Axis(0), test));
    let class_of = |l: ViewLabel| classes.iter().position(|&c| c == l).expect("present");
    let train_y: Vec<Option<usize>> = train.iter().map(|&i| Some(class_of(labels[i]))).collect();

    let mut store = ParamStore::new();
    store.insert("w", Array2::zeros((x.ncols(), classes.len())), ParamGroup::Model);
    store.insert("b", Array2::zeros((1, classes.len())), ParamGroup::Model);
    let mut adam = Adam::new(0.05, 0.05);
    for _ in 0..300 {
        let g = Graph::new();
        let b = Binder::new(&g, &store);
        let logits = g.constant(train_x.clone()).matmul(b.p("w")).add_row(b.p("b"));
        let l2 = b.p("w").mul(b.p("w")).sum().scale(1e-4);
        let loss = logits.cross_entropy(&train_y).add(l2);
        let grads = g.backward(loss);
        let grads = b.collect(&grads);
        adam.step(&mut store, &grads);
    }
    let logits = test_x.dot(store.get("w").expect("w")) + store.get("b").expect("b");
    let correct = logits
        .rows()
        .into_iter()
        .zip(test)
        .filter(|(row, &i)| {
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                .0;
            pred == class_of(labels[i])
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// View-probe accuracy on the raw features of all given datasets, using
/// the first `d`-wide block of every row where `d` is the narrowest width
/// present.
pub fn gap_probe(datasets: &[&LabeledDataset], probe_seed: u64) -> Result<f64> {
    let (x, labels) = stack_frames(datasets, |f| Ok(f.clone()))?;
    linear_probe(&x, &labels, probe_seed)
}

/// Stacks per-frame rows (after `map`) and view labels of every video.
/// Rows are cut to the narrowest width among the mapped matrices.
pub fn stack_frames(
    datasets: &[&LabeledDataset],
    map: impl Fn(&Array2<f64>) -> Result<Array2<f64>>,
) -> Result<(Array2<f64>, Vec<ViewLabel>)> {
    let mut mats = Vec::new();
    let mut labels = Vec::new();
    for ds in datasets {
        for item in &ds.items {
            mats.push(map(&item.features()?.frames)?);
            labels.extend_from_slice(item.views()?);
        }
    }
    let width = mats.iter().map(|m| m.ncols()).min().unwrap_or(0);
    let views: Vec<_> = mats.iter().map(|m| m.slice(ndarray::s![.., ..width])).collect();
    let x = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    Ok((x, labels))
}
