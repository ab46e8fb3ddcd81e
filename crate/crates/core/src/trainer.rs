//! Training stages: (view-invariant) pre-training on the source domain,
//! (view-invariant) fine-tuning on target plus under-sampled source,
//! checkpoints, model selection and embedding export.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{concat_rows, Adam, Binder, Graph, Mat, ParamGroup, ParamStore, Var};
use crate::captioner::{CaptionModel, LossWeights, ModelConfig, NetOut, TaskLoss};
use crate::data::{
    read_json, write_bytes, write_json, DatasetItem, Domain, EventAnnotation, EventPrediction, LabeledDataset,
    Representation, Split, ViewLabel, Vocabulary,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricReport};
use crate::viewadv::{adv_loss, balance_views, grl, reinit_classifier};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "PT")]
    Pt,
    #[serde(rename = "VI-PT")]
    ViPt,
    #[serde(rename = "FT")]
    Ft,
    #[serde(rename = "VI-FT")]
    ViFt,
}

impl Stage {
    pub fn is_view_invariant(self) -> bool {
        matches!(self, Stage::ViPt | Stage::ViFt)
    }

    pub fn is_finetune(self) -> bool {
        matches!(self, Stage::Ft | Stage::ViFt)
    }

    /// Checkpoint tag: "pt" or "ft".
    pub fn tag(self) -> &'static str {
        if self.is_finetune() {
            "ft"
        } else {
            "pt"
        }
    }

    /// View classes seen by the classifier in this stage.
    pub fn view_classes(self) -> usize {
        if self.is_finetune() {
            3
        } else {
            2
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pt => "PT",
            Stage::ViPt => "VI-PT",
            Stage::Ft => "FT",
            Stage::ViFt => "VI-FT",
        })
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "PT" => Ok(Stage::Pt),
            "VI-PT" => Ok(Stage::ViPt),
            "FT" => Ok(Stage::Ft),
            "VI-FT" => Ok(Stage::ViFt),
            _ => Err(Error::Validation(format!("unknown stage {s:?} (expected PT, VI-PT, FT or VI-FT)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Fixed number of frames every video is resampled to.
    pub t: usize,
    pub representation: Representation,
    pub min_word_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            t: 200,
            representation: Representation::V,
            min_word_count: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub stage: Stage,
    pub epochs: usize,
    pub seed: u64,
    pub lr_model: f64,
    pub lr_classifier: f64,
    /// Videos whose gradients are averaged per optimizer step.
    pub grad_accum: usize,
    pub weights: LossWeights,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            stage: Stage::Pt,
            epochs: 30,
            seed: 0,
            lr_model: 1e-5,
            lr_classifier: 1e-4,
            grad_accum: 1,
            weights: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvConfig {
    pub lambda_adv: f64,
    pub lambda_src: f64,
    /// Hidden width of the view classifier; `d_model` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classifier_hidden: Option<usize>,
}

impl Default for AdvConfig {
    fn default() -> Self {
        AdvConfig {
            lambda_adv: 0.1,
            lambda_src: 0.1,
            classifier_hidden: None,
        }
    }
}

/// Full training configuration; the TOML file has one section per field.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub adv: AdvConfig,
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::parse("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.t == 0 {
            return Err(Error::Config("[data] t must be >= 1".into()));
        }
        if !(self.adv.lambda_adv >= 0.0 && self.adv.lambda_src >= 0.0) {
            return Err(Error::Config("[adv] lambda_adv and lambda_src must be >= 0".into()));
        }
        if !(self.train.lr_model > 0.0 && self.train.lr_classifier > 0.0) {
            return Err(Error::Config("[train] learning rates must be > 0".into()));
        }
        if self.train.grad_accum == 0 {
            return Err(Error::Config("[train] grad_accum must be >= 1".into()));
        }
        self.model.validate()
    }

    pub fn classifier_hidden(&self, model: &CaptionModel) -> usize {
        self.adv.classifier_hidden.unwrap_or(model.config.d_model)
    }
}

/// Videos of one domain processed together.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub domain: Domain,
    pub items: Vec<&'a DatasetItem>,
}

impl<'a> Batch<'a> {
    pub fn new(domain: Domain, items: Vec<&'a DatasetItem>) -> Self {
        Batch { domain, items }
    }

    /// Items ordered by video id, so that losses do not depend on the
    /// order items were supplied in.
    fn sorted(&self) -> Vec<&'a DatasetItem> {
        let mut items = self.items.clone();
        items.sort_by(|a, b| a.video_id.cmp(&b.video_id));
        items
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLosses {
    pub task: f64,
    pub adv: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLosses {
    pub task_t: f64,
    pub task_s: f64,
    pub adv: f64,
    pub total: f64,
}

fn check_domain(batch: &Batch<'_>, domain: Domain) -> Result<()> {
    if batch.domain != domain {
        return Err(Error::Validation(format!(
            "expected a {domain}-domain batch, got a {}-domain batch",
            batch.domain
        )));
    }
    for item in &batch.items {
        if let Some(views) = &item.views {
            if let Some(bad) = views.iter().find(|v| !v.allowed_in(domain)) {
                return Err(Error::Validation(format!(
                    "{}: view {bad:?} is not a {domain}-domain view",
                    item.video_id
                )));
            }
        }
    }
    Ok(())
}

fn video_task<'g>(
    model: &CaptionModel,
    b: &Binder<'g, '_>,
    item: &DatasetItem,
    vocab: &Vocabulary,
    weights: &LossWeights,
) -> Result<(NetOut<'g>, TaskLoss<'g>)> {
    let x = b.graph().constant(item.features()?.frames.clone());
    let out = model.forward(b, x)?;
    let loss = model
        .task_loss(b, &out, &item.annotation, vocab, weights)
        .map_err(|e| Error::Validation(format!("{}: {e}", item.video_id)))?;
    Ok((out, loss))
}

fn mean<'g>(g: &'g Graph, vars: &[Var<'g>]) -> Var<'g> {
    match vars.split_first() {
        None => g.scalar(0.0),
        Some((first, rest)) => rest
            .iter()
            .fold(*first, |acc, v| acc.add(*v))
            .scale(1.0 / vars.len() as f64),
    }
}

/// Adversarial loss over class-balanced converter frames, behind a
/// gradient-reversal gate.
fn balanced_adv<'g>(
    model: &CaptionModel,
    b: &Binder<'g, '_>,
    outs: &[(&NetOut<'g>, &DatasetItem)],
    lambda: f64,
    rng: &mut impl Rng,
) -> Result<Var<'g>> {
    let mut labels: Vec<ViewLabel> = Vec::new();
    let mut frames = Vec::with_capacity(outs.len());
    for (out, item) in outs {
        labels.extend_from_slice(item.views()?);
        frames.push(out.converted);
    }
    let all = concat_rows(&frames);
    let keep = balance_views(&labels, rng);
    let picked: Vec<ViewLabel> = keep.iter().map(|&i| labels[i]).collect();
    adv_loss(model, b, grl(all.gather_rows(&keep), lambda)?, &picked)
}

/// Pre-training objective for one source batch. The returned node is what
/// gets differentiated: task loss plus the classifier loss seen through
/// the reversal gate. The reported total is `task - lambda_adv * adv`.
pub fn pretrain_objective<'g>(
    model: &CaptionModel,
    b: &Binder<'g, '_>,
    batch: &Batch<'_>,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(Var<'g>, PretrainLosses)> {
    let stage = cfg.train.stage;
    if stage.is_finetune() {
        return Err(Error::Validation(format!("pre-training step called in stage {stage}")));
    }
    check_domain(batch, Domain::Source)?;
    let items = batch.sorted();
    let mut outs = Vec::with_capacity(items.len());
    let mut tasks = Vec::with_capacity(items.len());
    for item in &items {
        let (out, loss) = video_task(model, b, item, vocab, &cfg.train.weights)?;
        tasks.push(loss.total);
        outs.push(out);
    }
    let task = mean(b.graph(), &tasks);
    if !stage.is_view_invariant() {
        let t = task.item();
        return Ok((task, PretrainLosses { task: t, adv: 0.0, total: t }));
    }
    if model.classifier_classes != Some(2) {
        return Err(Error::Validation(
            "view-invariant pre-training needs a 2-class view classifier".into(),
        ));
    }
    let lambda = cfg.adv.lambda_adv;
    let pairs: Vec<_> = outs.iter().zip(items.iter().copied()).collect();
    let adv = balanced_adv(model, b, &pairs, lambda, rng)?;
    let (t, a) = (task.item(), adv.item());
    Ok((
        task.add(adv),
        PretrainLosses {
            task: t,
            adv: a,
            total: t - lambda * a,
        },
    ))
}

/// Fine-tuning objective for a target batch and its matched source batch.
/// The reported total is `task_t + lambda_src * task_s - lambda_adv * adv`.
pub fn finetune_objective<'g>(
    model: &CaptionModel,
    b: &Binder<'g, '_>,
    target: &Batch<'_>,
    source: &Batch<'_>,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(Var<'g>, FinetuneLosses)> {
    let stage = cfg.train.stage;
    if !stage.is_finetune() {
        return Err(Error::Validation(format!("fine-tuning step called in stage {stage}")));
    }
    if stage.is_view_invariant() && model.classifier_classes != Some(3) {
        return Err(Error::Validation(
            "classifier not reinitialized: view-invariant fine-tuning needs a 3-class view classifier".into(),
        ));
    }
    check_domain(target, Domain::Target)?;
    check_domain(source, Domain::Source)?;
    let g = b.graph();
    let weights = &cfg.train.weights;
    let targets = target.sorted();
    let sources = source.sorted();
    let mut outs = Vec::new();
    let mut task_t = Vec::new();
    let mut task_s = Vec::new();
    for item in &sources {
        let (out, loss) = video_task(model, b, item, vocab, weights)?;
        task_s.push(loss.total);
        outs.push((out, *item));
    }
    for item in &targets {
        let (out, loss) = video_task(model, b, item, vocab, weights)?;
        task_t.push(loss.total);
        outs.push((out, *item));
    }
    let task_t = mean(g, &task_t);
    let task_s = mean(g, &task_s);
    let (lt, ls) = (task_t.item(), task_s.item());
    let lambda_src = cfg.adv.lambda_src;
    let task = task_t.add(task_s.scale(lambda_src));
    if !stage.is_view_invariant() {
        let total = lt + lambda_src * ls;
        return Ok((
            task,
            FinetuneLosses {
                task_t: lt,
                task_s: ls,
                adv: 0.0,
                total,
            },
        ));
    }
    let lambda = cfg.adv.lambda_adv;
    let pairs: Vec<_> = outs.iter().map(|(o, i)| (o, *i)).collect();
    let adv = balanced_adv(model, b, &pairs, lambda, rng)?;
    let a = adv.item();
    Ok((
        task.add(adv),
        FinetuneLosses {
            task_t: lt,
            task_s: ls,
            adv: a,
            total: lt + lambda_src * ls - lambda * a,
        },
    ))
}

/// Model, vocabulary, optimizer and RNG of one running stage.
pub struct Trainer {
    pub model: CaptionModel,
    pub vocab: Vocabulary,
    pub config: TrainConfig,
    pub rng: ChaCha8Rng,
    adam: Adam,
    pending: Vec<Option<Mat>>,
    pending_count: usize,
}

impl Trainer {
    pub fn new(model: CaptionModel, vocab: Vocabulary, config: TrainConfig, rng: ChaCha8Rng) -> Self {
        let adam = Adam::new(config.train.lr_model, config.train.lr_classifier);
        Trainer {
            model,
            vocab,
            config,
            rng,
            adam,
            pending: Vec::new(),
            pending_count: 0,
        }
    }

    fn apply(&mut self, grads: Vec<Option<Mat>>) {
        if self.pending.len() != grads.len() {
            self.pending = vec![None; grads.len()];
            self.pending_count = 0;
        }
        for (acc, g) in self.pending.iter_mut().zip(grads) {
            match (acc.as_mut(), g) {
                (Some(a), Some(g)) => *a += &g,
                (None, Some(g)) => *acc = Some(g),
                _ => {}
            }
        }
        self.pending_count += 1;
        if self.pending_count >= self.config.train.grad_accum {
            let k = self.pending_count as f64;
            let mut grads = std::mem::take(&mut self.pending);
            if k > 1.0 {
                for g in grads.iter_mut().flatten() {
                    *g /= k;
                }
            }
            self.adam.step(&mut self.model.params, &grads);
            self.pending_count = 0;
        }
    }

    /// One optimizer update on a source batch.
    pub fn pretrain_step(&mut self, batch: &Batch<'_>) -> Result<PretrainLosses> {
        let g = Graph::new();
        let b = Binder::new(&g, &self.model.params);
        let (objective, losses) = pretrain_objective(&self.model, &b, batch, &self.vocab, &self.config, &mut self.rng)?;
        let grads = b.collect(&g.backward(objective));
        drop(b);
        self.apply(grads);
        Ok(losses)
    }

    /// One optimizer update on a target batch and its matched source batch.
    pub fn finetune_step(&mut self, target: &Batch<'_>, source: &Batch<'_>) -> Result<FinetuneLosses> {
        let g = Graph::new();
        let b = Binder::new(&g, &self.model.params);
        let (objective, losses) =
            finetune_objective(&self.model, &b, target, source, &self.vocab, &self.config, &mut self.rng)?;
        let grads = b.collect(&g.backward(objective));
        drop(b);
        self.apply(grads);
        Ok(losses)
    }
}

/// Endless stream of source batches of size `n` drawn without replacement
/// from a shuffled permutation of `0..m`, reshuffled when exhausted.
#[derive(Debug, Clone)]
pub struct SourceSampler {
    m: usize,
    n: usize,
    queue: Vec<usize>,
    rng: ChaCha8Rng,
}

impl SourceSampler {
    pub fn new(m: usize, n: usize, rng: ChaCha8Rng) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::Validation(format!("under-sampling needs m >= 1 and n >= 1 (got m={m}, n={n})")));
        }
        Ok(SourceSampler {
            m,
            n,
            queue: Vec::new(),
            rng,
        })
    }

    fn refill(&mut self) {
        let mut perm: Vec<usize> = (0..self.m).collect();
        perm.shuffle(&mut self.rng);
        self.queue.extend(perm);
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut batch: Vec<usize> = Vec::with_capacity(self.n);
        while batch.len() < self.n {
            // Distinct indices within a batch while that is possible.
            let must_differ = batch.len() < self.m;
            let pos = self
                .queue
                .iter()
                .position(|i| !must_differ || !batch.contains(i));
            match pos {
                Some(p) => batch.push(self.queue.remove(p)),
                None => self.refill(),
            }
        }
        batch
    }
}

impl Iterator for SourceSampler {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        Some(self.next_batch())
    }
}

/// Batches of `n` source indices out of `m`, see [`SourceSampler`].
pub fn undersample_sources(m: usize, n: usize, rng: ChaCha8Rng) -> Result<SourceSampler> {
    SourceSampler::new(m, n, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    /// "pt" or "ft".
    pub tag: String,
    pub classifier_classes: Option<usize>,
    pub epoch: usize,
}

/// Everything needed to resume or evaluate a model.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: CaptionModel,
    pub vocab: Vocabulary,
    pub config: TrainConfig,
    pub rng: ChaCha8Rng,
    pub meta: CheckpointMeta,
}

const PARAMS_MAGIC: &[u8; 8] = b"VDVCPRM1";

/// Serializes named tensors as little-endian f32.
pub fn encode_params(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.params() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(match p.group {
            ParamGroup::Model => 0,
            ParamGroup::Classifier => 1,
        });
        out.extend_from_slice(&(p.value.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(p.value.ncols() as u32).to_le_bytes());
        for &v in p.value.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamStore> {
    let bad = |m: &str| Error::parse("parameter file", m.to_string());
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != PARAMS_MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes([s[0], s[1], s[2], s[3]]) as usize;
    let count = u32_at(take(4)?);
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = u32_at(take(4)?);
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("non-utf8 name"))?;
        let group = match take(1)?[0] {
            0 => ParamGroup::Model,
            1 => ParamGroup::Classifier,
            _ => return Err(bad("unknown parameter group")),
        };
        let rows = u32_at(take(4)?);
        let cols = u32_at(take(4)?);
        let raw = take(rows * cols * 4)?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let value = Array2::from_shape_vec((rows, cols), values).map_err(|e| bad(&e.to_string()))?;
        store.insert(name, value, group);
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(store)
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_bytes(&dir.join("params.bin"), &encode_params(&self.model.params))?;
        let mut config = self.config.clone();
        config.model = self.model.config.clone();
        write_bytes(&dir.join("config.toml"), config.to_toml().as_bytes())?;
        write_json(&dir.join("vocab.json"), &self.vocab)?;
        write_json(&dir.join("rng.json"), &self.rng)?;
        write_json(&dir.join("meta.json"), &self.meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let params_path = dir.join("params.bin");
        let bytes = fs::read(&params_path).map_err(|e| Error::io(&params_path, e))?;
        let params = decode_params(&bytes)?;
        let config = TrainConfig::load(&dir.join("config.toml"))?;
        let vocab: Vocabulary = read_json(&dir.join("vocab.json"))?;
        let rng: ChaCha8Rng = read_json(&dir.join("rng.json"))?;
        let meta: CheckpointMeta = read_json(&dir.join("meta.json"))?;
        let model = CaptionModel {
            config: config.model.clone(),
            vocab_size: vocab.len(),
            params,
            classifier_classes: meta.classifier_classes,
        };
        Ok(Checkpoint {
            model,
            vocab,
            config,
            rng,
            meta,
        })
    }
}

/// Where a stage's model comes from.
pub enum Init<'a> {
    Fresh(Vocabulary),
    Checkpoint(&'a Path),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: BTreeMap<String, f64>,
    pub report: Option<MetricReport>,
    pub sum_meteor: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: Stage,
    pub checkpoint: PathBuf,
    pub best_epoch: usize,
    pub epochs: Vec<EpochRecord>,
}

impl StageResult {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }
}

/// Predictions of `model` for every video of `ds`.
pub fn predict_dataset(
    model: &CaptionModel,
    ds: &LabeledDataset,
    vocab: &Vocabulary,
) -> Result<BTreeMap<String, Vec<EventPrediction>>> {
    ds.items
        .iter()
        .map(|item| {
            let preds = model.predict(&item.features()?.frames, item.annotation.duration, vocab)?;
            Ok((item.video_id.clone(), preds))
        })
        .collect()
}

pub fn references(ds: &LabeledDataset) -> BTreeMap<String, EventAnnotation> {
    ds.items
        .iter()
        .map(|i| (i.video_id.clone(), i.annotation.clone()))
        .collect()
}

/// Predicts and scores every video of `ds`.
pub fn evaluate_model(model: &CaptionModel, ds: &LabeledDataset, vocab: &Vocabulary) -> Result<MetricReport> {
    let preds = predict_dataset(model, ds, vocab)?;
    Ok(evaluate(&preds, &references(ds)))
}

fn add_losses(acc: &mut BTreeMap<String, f64>, parts: &[(&str, f64)]) {
    for (k, v) in parts {
        *acc.entry(k.to_string()).or_insert(0.0) += v;
    }
}

/// Prepares model, vocabulary and classifier for `cfg.train.stage`.
pub fn init_model(
    cfg: &TrainConfig,
    init: Init<'_>,
    widths: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(CaptionModel, Vocabulary)> {
    let stage = cfg.train.stage;
    let (mut model, vocab) = match init {
        Init::Fresh(vocab) => {
            let mut mc = cfg.model.clone();
            mc.input_widths.retain(|w| widths.contains(w));
            (CaptionModel::new(mc, vocab.len(), rng)?, vocab)
        }
        Init::Checkpoint(dir) => {
            let ckpt = Checkpoint::load(dir)?;
            if stage.is_finetune() && ckpt.meta.tag != "pt" {
                return Err(Error::Validation(format!(
                    "{}: fine-tuning starts from a pre-training checkpoint, found tag {:?}",
                    dir.display(),
                    ckpt.meta.tag
                )));
            }
            (ckpt.model, ckpt.vocab)
        }
    };
    for &w in widths {
        model.register_input(w, rng);
    }
    if stage.is_view_invariant() {
        let hidden = cfg.classifier_hidden(&model);
        reinit_classifier(&mut model, stage.view_classes(), hidden, rng)?;
    } else {
        model.params.remove_group(ParamGroup::Classifier);
        model.classifier_classes = None;
    }
    Ok((model, vocab))
}

fn feature_widths(datasets: &[&LabeledDataset]) -> Result<Vec<usize>> {
    let mut widths = Vec::new();
    for ds in datasets {
        for item in &ds.items {
            let w = item.features()?.width();
            if !widths.contains(&w) {
                widths.push(w);
            }
        }
    }
    widths.sort_unstable();
    Ok(widths)
}

/// Trains one stage, evaluating after every epoch and keeping the
/// checkpoint with the best sum_METEOR (earliest epoch on ties) under
/// `out_dir/checkpoint`. Without an eval split the last epoch is kept.
pub fn run_stage(
    cfg: &TrainConfig,
    source: &LabeledDataset,
    target: Option<&LabeledDataset>,
    init: Init<'_>,
    out_dir: &Path,
) -> Result<StageResult> {
    cfg.validate()?;
    let stage = cfg.train.stage;
    if source.domain != Domain::Source {
        return Err(Error::Validation("source dataset must be source-domain".into()));
    }
    let target = match (stage.is_finetune(), target) {
        (true, None) => return Err(Error::Validation(format!("stage {stage} needs a target dataset"))),
        (true, Some(t)) if t.domain != Domain::Target => {
            return Err(Error::Validation("target dataset must be target-domain".into()))
        }
        (true, Some(t)) => Some(t),
        (false, _) => None,
    };
    let t = cfg.data.t;
    let source = source.resampled(t)?;
    let target = target.map(|d| d.resampled(t)).transpose()?;
    let mut used: Vec<&LabeledDataset> = vec![&source];
    used.extend(target.as_ref());
    let widths = feature_widths(&used)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let (model, vocab) = init_model(cfg, init, &widths, &mut rng)?;
    let mut trainer = Trainer::new(model, vocab, cfg.clone(), rng);

    let src_train = source.split(Split::Train);
    let (train_set, eval_set) = match &target {
        Some(tg) => (tg.split(Split::Train), tg.split(Split::Eval)),
        None => (src_train.clone(), source.split(Split::Eval)),
    };
    if train_set.is_empty() {
        return Err(Error::Validation(format!("stage {stage}: no training videos")));
    }
    if stage.is_finetune() && src_train.is_empty() {
        return Err(Error::Validation(format!("stage {stage}: no source training videos")));
    }
    let mut sampler = if stage.is_finetune() {
        let sub = ChaCha8Rng::seed_from_u64(trainer.rng.gen());
        Some(SourceSampler::new(src_train.len(), train_set.len(), sub)?)
    } else {
        None
    };

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt_dir = out_dir.join("checkpoint");
    let mut saved = false;
    let mut best: Option<(usize, f64)> = None;
    let mut epochs = Vec::with_capacity(cfg.train.epochs);
    for epoch in 1..=cfg.train.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut trainer.rng);
        let sources = sampler.as_mut().map(SourceSampler::next_batch);
        let mut sums = BTreeMap::new();
        for (k, &i) in order.iter().enumerate() {
            let item = &train_set.items[i];
            let parts: Vec<(&str, f64)> = match &sources {
                None => {
                    let l = trainer.pretrain_step(&Batch::new(Domain::Source, vec![item]))?;
                    vec![("task", l.task), ("adv", l.adv), ("total", l.total)]
                }
                Some(src) => {
                    let s = &src_train.items[src[k]];
                    let l = trainer.finetune_step(
                        &Batch::new(Domain::Target, vec![item]),
                        &Batch::new(Domain::Source, vec![s]),
                    )?;
                    vec![("task_t", l.task_t), ("task_s", l.task_s), ("adv", l.adv), ("total", l.total)]
                }
            };
            if parts.iter().any(|(_, v)| !v.is_finite()) || !trainer.model.params.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    checkpoint: saved.then(|| ckpt_dir.clone()),
                });
            }
            add_losses(&mut sums, &parts);
        }
        let n = order.len() as f64;
        let losses = sums.into_iter().map(|(k, v)| (k, v / n)).collect();
        let report = if eval_set.is_empty() {
            None
        } else {
            Some(evaluate_model(&trainer.model, &eval_set, &trainer.vocab)?)
        };
        let sum_meteor = report.as_ref().map(MetricReport::sum_meteor);
        let improved = match (sum_meteor, best) {
            (None, _) => true,
            (Some(_), None) => true,
            (Some(s), Some((_, b))) => s > b,
        };
        if improved {
            best = Some((epoch, sum_meteor.unwrap_or(f64::NEG_INFINITY)));
            Checkpoint {
                model: trainer.model.clone(),
                vocab: trainer.vocab.clone(),
                config: trainer.config.clone(),
                rng: trainer.rng.clone(),
                meta: CheckpointMeta {
                    stage,
                    tag: stage.tag().to_string(),
                    classifier_classes: trainer.model.classifier_classes,
                    epoch,
                },
            }
            .save(&ckpt_dir)?;
            saved = true;
        }
        epochs.push(EpochRecord {
            epoch,
            losses,
            report,
            sum_meteor,
        });
    }
    let result = StageResult {
        stage,
        checkpoint: ckpt_dir,
        best_epoch: best.map_or(0, |b| b.0),
        epochs,
    };
    // Stored relative to the stage directory so the file does not depend
    // on where the run was placed.
    let stored = StageResult {
        checkpoint: PathBuf::from("checkpoint"),
        ..result.clone()
    };
    write_json(&out_dir.join("history.json"), &stored)?;
    Ok(result)
}

/// Writes converter outputs of every frame: a header line, then
/// `video_id, frame_index, view_label, values...` tab-separated. Videos
/// are resampled to `t` frames first; missing view labels are written
/// as `NA`.
pub fn dump_embeddings(model: &CaptionModel, datasets: &[&LabeledDataset], t: usize, path: &Path) -> Result<usize> {
    let d = model.config.d_model;
    let mut text = String::from("video_id\tframe_index\tview_label");
    for k in 0..d {
        text.push_str(&format!("\te{k}"));
    }
    text.push('\n');
    let mut rows = 0;
    for ds in datasets {
        let ds = ds.resampled(t)?;
        for item in &ds.items {
            let h = model.convert_values(&item.features()?.frames)?;
            for (i, row) in h.rows().into_iter().enumerate() {
                let label = item
                    .views
                    .as_ref()
                    .map_or_else(|| "NA".to_string(), |v| u8::from(v[i]).to_string());
                text.push_str(&format!("{}\t{i}\t{label}", item.video_id));
                for v in row {
                    text.push_str(&format!("\t{v}"));
                }
                text.push('\n');
                rows += 1;
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub video_id: String,
    pub frame_index: usize,
    pub view: Option<ViewLabel>,
    pub values: Vec<f64>,
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ctx = |line: usize| format!("{}:{}", path.display(), line + 1);
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, line)| {
            let mut cols = line.split('\t');
            let video_id = cols.next().unwrap_or_default().to_string();
            let frame_index = cols
                .next()
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| Error::parse(ctx(n), "bad frame index"))?;
            let view = match cols.next() {
                Some("NA") => None,
                Some(c) => Some(
                    c.parse::<u8>()
                        .ok()
                        .and_then(|v| ViewLabel::try_from(v).ok())
                        .ok_or_else(|| Error::parse(ctx(n), "bad view label"))?,
                ),
                None => return Err(Error::parse(ctx(n), "missing view label")),
            };
            let values = cols
                .map(|c| c.parse::<f64>().map_err(|e| Error::parse(ctx(n), e.to_string())))
                .collect::<Result<Vec<f64>>>()?;
            Ok(EmbeddingRow {
                video_id,
                frame_index,
                view,
                values,
            })
        })
        .collect()
}

/// Mean pairwise Euclidean distance between per-view centroids.
pub fn centroid_spread(rows: &[EmbeddingRow]) -> Option<f64> {
    let mut sums: BTreeMap<ViewLabel, (Vec<f64>, usize)> = BTreeMap::new();
    for r in rows {
        let Some(v) = r.view else { continue };
        let e = sums.entry(v).or_insert_with(|| (vec![0.0; r.values.len()], 0));
        for (a, b) in e.0.iter_mut().zip(&r.values) {
            *a += b;
        }
        e.1 += 1;
    }
    let centroids: Vec<Vec<f64>> = sums
        .into_values()
        .map(|(s, n)| s.into_iter().map(|v| v / n as f64).collect())
        .collect();
    if centroids.len() < 2 {
        return None;
    }
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            let d2: f64 = centroids[i].iter().zip(&centroids[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            total += d2.sqrt();
            pairs += 1;
        }
    }
    Some(total / pairs as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda_adv: f64,
    pub sum_meteor: f64,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Index of the selected row (highest sum_METEOR, first on ties).
    pub best: usize,
}

impl SweepResult {
    pub fn table(&self) -> String {
        let mut s = String::from("lambda_adv\tsum_METEOR\tselected\n");
        for (i, r) in self.rows.iter().enumerate() {
            s.push_str(&format!(
                "{}\t{:.6}\t{}\n",
                r.lambda_adv,
                r.sum_meteor,
                if i == self.best { "*" } else { "" }
            ));
        }
        s
    }
}

/// Runs VI-PT once per `lambda_adv` value and selects by source-side
/// sum_METEOR.
pub fn sweep_adv(cfg: &TrainConfig, source: &LabeledDataset, vocab: &Vocabulary, values: &[f64], out_dir: &Path) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::Validation("sweep needs at least one lambda_adv value".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &lambda in values {
        let mut c = cfg.clone();
        c.train.stage = Stage::ViPt;
        c.adv.lambda_adv = lambda;
        let dir = out_dir.join(format!("lambda_{lambda}"));
        let r = run_stage(&c, source, None, Init::Fresh(vocab.clone()), &dir)?;
        let sum_meteor = r.best().and_then(|e| e.sum_meteor).unwrap_or(0.0);
        rows.push(SweepRow {
            lambda_adv: lambda,
            sum_meteor,
            checkpoint: r.checkpoint,
        });
    }
    let mut best = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.sum_meteor > rows[best].sum_meteor {
            best = i;
        }
    }
    Ok(SweepResult { rows, best })
}
