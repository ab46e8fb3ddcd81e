//! Feature converter and set-prediction dense captioner.
//!
//! The converter maps each input representation to `d_model` with its own
//! projection, followed by two kernel-3 temporal convolutions in a residual
//! branch. The captioner is a one-layer transformer encoder, `N` learned
//! event queries decoded by cross-attention, and per-query heads for
//! localization, foreground score and captions, plus a count head.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{concat_cols, concat_rows, sigmoid, Binder, Graph, Mat, ParamGroup, ParamStore, Var};
use crate::data::{EventAnnotation, EventPrediction, TimeSegment, Vocabulary, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::metrics::tiou;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_queries: usize,
    pub k_max: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_caption_len: usize,
    /// Width (normalized time) of each query's temporal prior in
    /// cross-attention.
    pub query_window: f64,
    /// Input widths that get a projection at construction.
    pub input_widths: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_queries: 10,
            k_max: 12,
            heads: 4,
            ffn_dim: 256,
            max_caption_len: 20,
            query_window: 0.1,
            input_widths: vec![2048],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("invalid [model] config: {m}")));
        if self.d_model == 0 || self.n_queries == 0 || self.k_max == 0 || self.ffn_dim == 0 {
            return bad("sizes must be positive");
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad("d_model must be divisible by heads");
        }
        if self.max_caption_len == 0 {
            return bad("max_caption_len must be positive");
        }
        if !(self.query_window > 0.0) {
            return bad("query_window must be positive");
        }
        Ok(())
    }
}

/// Weights of the four task-loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub loc: f64,
    pub cls: f64,
    pub cap: f64,
    pub cnt: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            loc: 2.0,
            cls: 1.0,
            cap: 1.0,
            cnt: 0.5,
        }
    }
}

/// Plain-data outputs of one forward pass. Caption logits come from greedy
/// decoding, so their per-step argmax is the decoded caption.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutputs {
    /// `N x 2` rows of (center, length) in normalized time.
    pub segments: Array2<f64>,
    pub fg_logits: Vec<f64>,
    /// `N x L x |vocab|`.
    pub caption_logits: Array3<f64>,
    /// Logit `k` scores an event count of `k + 1`.
    pub count_logits: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub loc: f64,
    pub cls: f64,
    pub cap: f64,
    pub cnt: f64,
}

/// Graph nodes of the task loss.
pub struct TaskLoss<'g> {
    pub total: Var<'g>,
    pub loc: Var<'g>,
    pub cls: Var<'g>,
    pub cap: Var<'g>,
    pub cnt: Var<'g>,
    /// (query, event) pairs chosen by matching.
    pub matching: Vec<(usize, usize)>,
}

impl TaskLoss<'_> {
    pub fn components(&self) -> LossComponents {
        LossComponents {
            total: self.total.item(),
            loc: self.loc.item(),
            cls: self.cls.item(),
            cap: self.cap.item(),
            cnt: self.cnt.item(),
        }
    }
}

/// Graph nodes of one forward pass.
pub struct NetOut<'g> {
    /// Converter output, `t x d_model`.
    pub converted: Var<'g>,
    /// Encoder output, `t x d_model`.
    pub encoded: Var<'g>,
    /// Decoded queries, `N x d_model`.
    pub queries: Var<'g>,
    /// `N x 2` (center, length), squashed into (0, 1).
    pub segments: Var<'g>,
    pub fg_logits: Var<'g>,
    pub count_logits: Var<'g>,
}

/// Converter and captioner parameters, plus the view classifier when one
/// is attached (see `viewadv`).
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionModel {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub params: ParamStore,
    /// Output classes of the attached view classifier.
    pub classifier_classes: Option<usize>,
}

fn projection_name(width: usize) -> (String, String) {
    (format!("conv.in{width}.w"), format!("conv.in{width}.b"))
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Sinusoidal positional encoding, `t x d`.
pub fn positional_encoding(t: usize, d: usize) -> Mat {
    Array2::from_shape_fn((t, d), |(pos, i)| {
        let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let a = pos as f64 / rate;
        if i % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

/// Normalized time of row `j` of a `t`-row feature matrix.
fn frame_time(j: usize, t: usize) -> f64 {
    (j as f64 + 0.5) / t as f64
}

impl CaptionModel {
    pub fn new(config: ModelConfig, vocab_size: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = config.ffn_dim;
        let g = ParamGroup::Model;
        let mut p = ParamStore::new();
        for layer in ["conv1", "conv2"] {
            for tap in 0..3 {
                p.insert_xavier(&format!("{layer}.w{tap}"), d, d, g, rng);
            }
            p.insert(format!("{layer}.b"), Array2::zeros((1, d)), g);
        }
        for block in ["enc", "dec"] {
            for m in ["wq", "wk", "wv", "wo"] {
                p.insert_xavier(&format!("{block}.{m}"), d, d, g, rng);
            }
            p.insert(format!("{block}.bo"), Array2::zeros((1, d)), g);
            for ln in ["ln1", "ln2"] {
                p.insert(format!("{block}.{ln}.g"), Array2::ones((1, d)), g);
                p.insert(format!("{block}.{ln}.b"), Array2::zeros((1, d)), g);
            }
            p.insert_xavier(&format!("{block}.ff1.w"), d, f, g, rng);
            p.insert(format!("{block}.ff1.b"), Array2::zeros((1, f)), g);
            p.insert_xavier(&format!("{block}.ff2.w"), f, d, g, rng);
            p.insert(format!("{block}.ff2.b"), Array2::zeros((1, d)), g);
        }
        let n = config.n_queries;
        p.insert_normal("query.embed", n, d, 1.0, g, rng);
        p.insert(
            "query.ref",
            Array2::from_shape_fn((n, 1), |(i, _)| logit((i as f64 + 0.5) / n as f64)),
            g,
        );
        p.insert_xavier("head.loc.w", d, 2, g, rng);
        p.insert("head.loc.b", ndarray::array![[0.0, logit(0.15)]], g);
        p.insert_xavier("head.fg.w", d, 1, g, rng);
        p.insert("head.fg.b", Array2::zeros((1, 1)), g);
        p.insert_xavier("head.cnt.w", d, config.k_max, g, rng);
        p.insert("head.cnt.b", Array2::zeros((1, config.k_max)), g);
        p.insert_normal("cap.embed", vocab_size, d, 0.1, g, rng);
        for m in ["wx", "wh", "wq", "watt"] {
            p.insert_xavier(&format!("cap.{m}"), d, d, g, rng);
        }
        p.insert("cap.b", Array2::zeros((1, d)), g);
        p.insert_xavier("cap.out.w", 2 * d, vocab_size, g, rng);
        p.insert("cap.out.b", Array2::zeros((1, vocab_size)), g);
        let mut model = CaptionModel {
            config,
            vocab_size,
            params: p,
            classifier_classes: None,
        };
        for w in model.config.input_widths.clone() {
            model.register_input(w, rng);
        }
        Ok(model)
    }

    pub fn has_input(&self, width: usize) -> bool {
        self.params.index_of(&projection_name(width).0).is_some()
    }

    pub fn input_widths(&self) -> Vec<usize> {
        self.params
            .params()
            .iter()
            .filter_map(|p| p.name.strip_prefix("conv.in")?.strip_suffix(".w")?.parse().ok())
            .collect()
    }

    /// Adds an input projection for `width` if missing. When a registered
    /// width `w` divides `width` (a concatenation of `w`-wide blocks), the
    /// first block starts as a copy of the `w` projection so that the
    /// leading block keeps its trained mapping.
    pub fn register_input(&mut self, width: usize, rng: &mut impl Rng) {
        if self.has_input(width) {
            return;
        }
        let d = self.config.d_model;
        let (wn, bn) = projection_name(width);
        self.params.insert_xavier(&wn, width, d, ParamGroup::Model, rng);
        self.params.insert(bn.clone(), Array2::zeros((1, d)), ParamGroup::Model);
        let base = self
            .input_widths()
            .into_iter()
            .filter(|&w| w < width && width.is_multiple_of(w))
            .max();
        if let Some(base) = base {
            let (bw, bb) = projection_name(base);
            let base_w = self.params.get(&bw).cloned().expect("registered");
            let base_b = self.params.get(&bb).cloned().expect("registered");
            let w = self.params.get_mut(&wn).expect("just inserted");
            w.slice_mut(ndarray::s![..base, ..]).assign(&base_w);
            w.slice_mut(ndarray::s![base.., ..]).mapv_inplace(|v| v * 0.1);
            *self.params.get_mut(&bn).expect("just inserted") = base_b;
        }
        if !self.config.input_widths.contains(&width) {
            self.config.input_widths.push(width);
        }
    }

    /// Applies the converter to `x`. Rows are layer-normalized without
    /// affine parameters, so the adversary cannot be fooled by rescaling.
    pub fn convert<'g>(&self, b: &Binder<'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
        let width = x.dim().1;
        let (wn, bn) = projection_name(width);
        if !b.has(&wn) {
            return Err(Error::Shape(format!(
                "no input projection registered for feature width {width} (registered: {:?})",
                self.input_widths()
            )));
        }
        let h = x.matmul(b.p(&wn)).add_row(b.p(&bn)).relu();
        let c1 = conv3(b, "conv1", h).relu();
        Ok(h.add(conv3(b, "conv2", c1)).layer_norm_rows(LN_EPS))
    }

    /// Converter output for plain features.
    pub fn convert_values(&self, x: &Mat) -> Result<Mat> {
        let g = Graph::new();
        let b = Binder::new(&g, &self.params);
        let out = self.convert(&b, g.constant(x.clone()))?;
        Ok((*out.value()).clone())
    }

    pub fn forward<'g>(&self, b: &Binder<'g, '_>, x: Var<'g>) -> Result<NetOut<'g>> {
        let g = b.graph();
        let cfg = &self.config;
        let (t, _) = x.dim();
        if t == 0 {
            return Err(Error::Shape("empty feature matrix".into()));
        }
        let converted = self.convert(b, x)?;
        let pe = g.constant(positional_encoding(t, cfg.d_model));
        let e = converted.add(pe);
        let attn = mha(b, "enc", e, e, e, None, cfg.heads);
        let e1 = layer_norm(b, "enc.ln1", e.add(attn));
        let encoded = layer_norm(b, "enc.ln2", e1.add(ffn(b, "enc", e1)));

        let queries0 = b.p("query.embed");
        let refs = b.p("query.ref");
        let n = cfg.n_queries;
        let sigma = cfg.query_window;
        // Gaussian prior over frame times around each query's reference
        // point, differentiable in the reference.
        let times = Array2::from_shape_fn((n, t), |(_, j)| frame_time(j, t));
        let centers = refs.sigmoid().matmul(g.constant(Array2::ones((1, t))));
        let dt = centers.sub(g.constant(times));
        let prior = dt.mul(dt).scale(-1.0 / (2.0 * sigma * sigma));
        let keys = encoded.add(pe);
        let cross = mha(b, "dec", queries0, keys, encoded, Some(prior), cfg.heads);
        let q1 = layer_norm(b, "dec.ln1", queries0.add(cross));
        let queries = layer_norm(b, "dec.ln2", q1.add(ffn(b, "dec", q1)));

        let offsets = queries.matmul(b.p("head.loc.w")).add_row(b.p("head.loc.b"));
        let shift = concat_cols(&[refs, g.constant(Array2::zeros((n, 1)))]);
        let segments = offsets.add(shift).sigmoid();
        let fg_logits = queries.matmul(b.p("head.fg.w")).add_row(b.p("head.fg.b"));
        let count_logits = queries
            .mean_rows()
            .matmul(b.p("head.cnt.w"))
            .add_row(b.p("head.cnt.b"));
        Ok(NetOut {
            converted,
            encoded,
            queries,
            segments,
            fg_logits,
            count_logits,
        })
    }

    /// Teacher-forced caption cross-entropy for matched (query, event)
    /// pairs. Each caption attends to the encoder output under a soft
    /// window around its ground-truth segment.
    pub fn caption_loss<'g>(
        &self,
        b: &Binder<'g, '_>,
        out: &NetOut<'g>,
        pairs: &[(usize, usize)],
        gt: &EventAnnotation,
        vocab: &Vocabulary,
    ) -> Var<'g> {
        let g = b.graph();
        if pairs.is_empty() {
            return g.scalar(0.0);
        }
        let rows: Vec<usize> = pairs.iter().map(|&(q, _)| q).collect();
        let windows: Vec<(f64, f64)> = pairs
            .iter()
            .map(|&(_, e)| {
                let s = gt.segments[e];
                (s.center() / gt.duration, s.length() / gt.duration)
            })
            .collect();
        let targets: Vec<Vec<usize>> = pairs
            .iter()
            .map(|&(_, e)| caption_targets(vocab, &gt.sentences[e], self.config.max_caption_len))
            .collect();
        let steps = targets.iter().map(Vec::len).max().unwrap_or(0);
        let q = out.queries.gather_rows(&rows);
        let mut dec = CaptionDecoder::new(b, q, out.encoded, &windows);
        let mut logits = Vec::with_capacity(steps);
        let mut flat_targets = Vec::with_capacity(steps * rows.len());
        for s in 0..steps {
            let inputs: Vec<usize> = targets
                .iter()
                .map(|tg| if s == 0 { BOS } else { tg.get(s - 1).copied().unwrap_or(PAD) })
                .collect();
            logits.push(dec.step(&inputs));
            flat_targets.extend(targets.iter().map(|tg| tg.get(s).copied()));
        }
        concat_rows(&logits).cross_entropy(&flat_targets)
    }

    /// Task loss of one video on the graph.
    pub fn task_loss<'g>(
        &self,
        b: &Binder<'g, '_>,
        out: &NetOut<'g>,
        gt: &EventAnnotation,
        vocab: &Vocabulary,
        weights: &LossWeights,
    ) -> Result<TaskLoss<'g>> {
        task_loss_graph(out.segments, out.fg_logits, out.count_logits, gt, weights, |pairs| {
            self.caption_loss(b, out, pairs, gt, vocab)
        })
    }

    /// Forward pass with greedy caption decoding for every query, each
    /// attending under the window of its own predicted segment.
    pub fn infer(&self, x: &Mat) -> Result<QueryOutputs> {
        let g = Graph::new();
        let b = Binder::new(&g, &self.params);
        let out = self.forward(&b, g.constant(x.clone()))?;
        let segments = (*out.segments.value()).clone();
        let n = segments.nrows();
        let windows: Vec<(f64, f64)> = segments.rows().into_iter().map(|r| (r[0], r[1])).collect();
        let mut dec = CaptionDecoder::new(&b, out.queries, out.encoded, &windows);
        let steps = self.config.max_caption_len;
        let mut caption_logits = Array3::zeros((n, steps, self.vocab_size));
        let mut inputs = vec![BOS; n];
        for s in 0..steps {
            let logits = dec.step(&inputs);
            let lv = logits.value();
            caption_logits.index_axis_mut(Axis(1), s).assign(&*lv);
            inputs = lv.rows().into_iter().map(|r| argmax(r.iter().copied())).collect();
        }
        Ok(QueryOutputs {
            segments,
            fg_logits: out.fg_logits.value().iter().copied().collect(),
            caption_logits,
            count_logits: out.count_logits.value().iter().copied().collect(),
        })
    }

    pub fn predict(&self, x: &Mat, duration: f64, vocab: &Vocabulary) -> Result<Vec<EventPrediction>> {
        Ok(decode_events(&self.infer(x)?, duration, vocab))
    }
}

/// Kernel-3 same-padded temporal convolution.
fn conv3<'g>(b: &Binder<'g, '_>, name: &str, h: Var<'g>) -> Var<'g> {
    let prev = h.shift_rows(-1).matmul(b.p(&format!("{name}.w0")));
    let cur = h.matmul(b.p(&format!("{name}.w1")));
    let next = h.shift_rows(1).matmul(b.p(&format!("{name}.w2")));
    prev.add(cur).add(next).add_row(b.p(&format!("{name}.b")))
}

fn layer_norm<'g>(b: &Binder<'g, '_>, name: &str, x: Var<'g>) -> Var<'g> {
    x.layer_norm_rows(LN_EPS)
        .mul_row(b.p(&format!("{name}.g")))
        .add_row(b.p(&format!("{name}.b")))
}

fn ffn<'g>(b: &Binder<'g, '_>, block: &str, x: Var<'g>) -> Var<'g> {
    x.matmul(b.p(&format!("{block}.ff1.w")))
        .add_row(b.p(&format!("{block}.ff1.b")))
        .relu()
        .matmul(b.p(&format!("{block}.ff2.w")))
        .add_row(b.p(&format!("{block}.ff2.b")))
}

fn mha<'g>(
    b: &Binder<'g, '_>,
    block: &str,
    q_in: Var<'g>,
    k_in: Var<'g>,
    v_in: Var<'g>,
    bias: Option<Var<'g>>,
    heads: usize,
) -> Var<'g> {
    let q = q_in.matmul(b.p(&format!("{block}.wq")));
    let k = k_in.matmul(b.p(&format!("{block}.wk")));
    let v = v_in.matmul(b.p(&format!("{block}.wv")));
    let d = q.dim().1;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let outs: Vec<Var<'g>> = (0..heads)
        .map(|h| {
            let qh = q.slice_cols(h * dh, dh);
            let kh = k.slice_cols(h * dh, dh);
            let vh = v.slice_cols(h * dh, dh);
            let mut scores = qh.matmul_t(kh).scale(scale);
            if let Some(bias) = bias {
                scores = scores.add(bias);
            }
            scores.softmax_rows().matmul(vh)
        })
        .collect();
    let joined = if outs.len() == 1 { outs[0] } else { concat_cols(&outs) };
    joined
        .matmul(b.p(&format!("{block}.wo")))
        .add_row(b.p(&format!("{block}.bo")))
}

/// Single-layer attention RNN decoding one caption per row.
struct CaptionDecoder<'g, 'b, 's> {
    b: &'b Binder<'g, 's>,
    query_term: Var<'g>,
    memory: Var<'g>,
    window: Var<'g>,
    hidden: Option<Var<'g>>,
}

impl<'g, 'b, 's> CaptionDecoder<'g, 'b, 's> {
    fn new(b: &'b Binder<'g, 's>, queries: Var<'g>, memory: Var<'g>, windows: &[(f64, f64)]) -> Self {
        let t = memory.dim().0;
        let min_half = 0.5 / t as f64;
        let window = Array2::from_shape_fn((windows.len(), t), |(r, j)| {
            let (c, l) = windows[r];
            let half = (0.5 * l).max(min_half);
            let z = (frame_time(j, t) - c) / half;
            -0.5 * z * z
        });
        CaptionDecoder {
            b,
            query_term: queries.matmul(b.p("cap.wq")).add_row(b.p("cap.b")),
            memory,
            window: b.graph().constant(window),
            hidden: None,
        }
    }

    /// Feeds one token per row and returns next-token logits.
    fn step(&mut self, inputs: &[usize]) -> Var<'g> {
        let b = self.b;
        let emb = b.p("cap.embed").gather_rows(inputs);
        let mut pre = emb.matmul(b.p("cap.wx")).add(self.query_term);
        if let Some(h) = self.hidden {
            pre = pre.add(h.matmul(b.p("cap.wh")));
        }
        let h = pre.tanh();
        self.hidden = Some(h);
        let d = h.dim().1;
        let scores = h
            .matmul(b.p("cap.watt"))
            .matmul_t(self.memory)
            .scale(1.0 / (d as f64).sqrt())
            .add(self.window);
        let ctx = scores.softmax_rows().matmul(self.memory);
        concat_cols(&[h, ctx])
            .matmul(b.p("cap.out.w"))
            .add_row(b.p("cap.out.b"))
    }
}

/// Token targets for one caption: the sentence followed by the end marker,
/// truncated to `max_len`.
pub fn caption_targets(vocab: &Vocabulary, sentence: &[String], max_len: usize) -> Vec<usize> {
    let mut t = vocab.encode(sentence);
    t.push(EOS);
    t.truncate(max_len);
    t
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// One-dimensional generalized IoU of (center, length) segments.
pub fn giou_1d(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (s1, e1) = (a.0 - 0.5 * a.1, a.0 + 0.5 * a.1);
    let (s2, e2) = (b.0 - 0.5 * b.1, b.0 + 0.5 * b.1);
    let inter = (e1.min(e2) - s1.max(s2)).max(0.0);
    let union = a.1 + b.1 - inter;
    let hull = e1.max(e2) - s1.min(s2);
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    if hull > 0.0 {
        iou - (hull - union) / hull
    } else {
        iou
    }
}

/// Normalized (center, length) of each ground-truth event.
fn normalized_events(gt: &EventAnnotation) -> Vec<(f64, f64)> {
    gt.segments
        .iter()
        .map(|s| (s.center() / gt.duration, s.length() / gt.duration))
        .collect()
}

/// Matching cost between every query and every event.
pub fn matching_cost(segments: &Array2<f64>, fg_logits: &[f64], gt: &EventAnnotation, weights: &LossWeights) -> Array2<f64> {
    let events = normalized_events(gt);
    Array2::from_shape_fn((segments.nrows(), events.len()), |(q, e)| {
        let p = (segments[[q, 0]], segments[[q, 1]]);
        let g = events[e];
        let l1 = (p.0 - g.0).abs() + (p.1 - g.1).abs();
        weights.cls * (1.0 - sigmoid(fg_logits[q])) + weights.loc * (l1 + 1.0 - giou_1d(p, g))
    })
}

/// Builds the four-term task loss. `caption_ce` receives the matched
/// (query, event) pairs and returns the caption cross-entropy node.
pub fn task_loss_graph<'g>(
    segments: Var<'g>,
    fg_logits: Var<'g>,
    count_logits: Var<'g>,
    gt: &EventAnnotation,
    weights: &LossWeights,
    caption_ce: impl FnOnce(&[(usize, usize)]) -> Var<'g>,
) -> Result<TaskLoss<'g>> {
    let g = segments.graph();
    let k_max = count_logits.dim().1;
    if gt.is_empty() {
        return Err(Error::Validation("ground truth has no events".into()));
    }
    if gt.len() > k_max {
        return Err(Error::Validation(format!(
            "{} ground-truth events exceed the count head's maximum of {k_max}",
            gt.len()
        )));
    }
    let fg_vals: Vec<f64> = fg_logits.value().iter().copied().collect();
    let cost = matching_cost(&segments.value(), &fg_vals, gt, weights);
    let matching = hungarian_match(&cost);
    let events = normalized_events(gt);
    let m = matching.len();

    let rows: Vec<usize> = matching.iter().map(|&(q, _)| q).collect();
    let gt_rows = Array2::from_shape_fn((m, 2), |(i, k)| {
        let e = events[matching[i].1];
        if k == 0 { e.0 } else { e.1 }
    });
    let pred = segments.gather_rows(&rows);
    let gt_c = g.constant(gt_rows.slice(ndarray::s![.., 0..1]).to_owned());
    let gt_l = g.constant(gt_rows.slice(ndarray::s![.., 1..2]).to_owned());
    let l1 = pred.sub(g.constant(gt_rows.clone())).abs().sum();
    let pc = pred.slice_cols(0, 1);
    let pl = pred.slice_cols(1, 1);
    let ps = pc.sub(pl.scale(0.5));
    let pe = pc.add(pl.scale(0.5));
    let gs = gt_c.sub(gt_l.scale(0.5));
    let ge = gt_c.add(gt_l.scale(0.5));
    let inter = pe.minimum(ge).sub(ps.maximum(gs)).relu();
    let union = pl.add(gt_l).sub(inter);
    let hull = pe.maximum(ge).sub(ps.minimum(gs));
    let giou = inter.div(union).sub(hull.sub(union).div(hull));
    let loc = l1.add(giou.scale(-1.0).add_scalar(1.0).sum()).scale(1.0 / m as f64);

    let mut fg_targets = vec![0.0; fg_vals.len()];
    for &q in &rows {
        fg_targets[q] = 1.0;
    }
    let cls = fg_logits.bce_with_logits(&fg_targets);
    let cap = caption_ce(&matching);
    let cnt = count_logits.cross_entropy(&[Some(gt.len() - 1)]);
    let total = loc
        .scale(weights.loc)
        .add(cls.scale(weights.cls))
        .add(cap.scale(weights.cap))
        .add(cnt.scale(weights.cnt));
    Ok(TaskLoss {
        total,
        loc,
        cls,
        cap,
        cnt,
        matching,
    })
}

/// Task loss of plain outputs, reading `caption_logits[q]` as the
/// teacher-forced logits for the caption of the event matched to `q`.
pub fn task_loss(outputs: &QueryOutputs, gt: &EventAnnotation, vocab: &Vocabulary, weights: &LossWeights) -> Result<LossComponents> {
    let g = Graph::new();
    let segments = g.constant(outputs.segments.clone());
    let n = outputs.fg_logits.len();
    let fg = g.constant(Array2::from_shape_vec((n, 1), outputs.fg_logits.clone()).map_err(|e| Error::Shape(e.to_string()))?);
    let k = outputs.count_logits.len();
    let count = g.constant(Array2::from_shape_vec((1, k), outputs.count_logits.clone()).map_err(|e| Error::Shape(e.to_string()))?);
    let steps = outputs.caption_logits.len_of(Axis(1));
    let loss = task_loss_graph(segments, fg, count, gt, weights, |pairs| {
        let mut logits = Vec::new();
        let mut targets = Vec::new();
        for &(q, e) in pairs {
            let tg = caption_targets(vocab, &gt.sentences[e], steps);
            logits.push(g.constant(outputs.caption_logits.index_axis(Axis(0), q).to_owned()));
            targets.extend((0..steps).map(|s| tg.get(s).copied()));
        }
        if logits.is_empty() {
            g.scalar(0.0)
        } else {
            concat_rows(&logits).cross_entropy(&targets)
        }
    })?;
    Ok(loss.components())
}

/// Optimal value of a rows <= cols assignment problem, plus the column of
/// each row.
fn solve_assignment(cost: &Array2<f64>) -> (f64, Vec<usize>) {
    let (n, m) = cost.dim();
    debug_assert!(n <= m);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut cols = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            cols[p[j] - 1] = j - 1;
        }
    }
    let total = cols.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
    (total, cols)
}

/// Minimum total cost of `min(|rows|, |cols|)` pairs within a sub-matrix.
fn optimum(cost: &Array2<f64>, rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    let sub = cost.select(Axis(0), rows).select(Axis(1), cols);
    if rows.len() <= cols.len() {
        solve_assignment(&sub).0
    } else {
        solve_assignment(&sub.t().to_owned()).0
    }
}

/// Minimum-cost assignment of `min(n, m)` (row, col) pairs, sorted by row.
/// Among optimal assignments the lexicographically smallest pair list is
/// returned.
pub fn hungarian_match(cost: &Array2<f64>) -> Vec<(usize, usize)> {
    let (n, m) = cost.dim();
    let all_rows: Vec<usize> = (0..n).collect();
    let all_cols: Vec<usize> = (0..m).collect();
    let best = optimum(cost, &all_rows, &all_cols);
    let tol = 1e-9 * (1.0 + best.abs());
    let mut rows = all_rows;
    let mut cols = all_cols;
    let mut fixed = 0.0;
    let mut pairs = Vec::with_capacity(n.min(m));
    for i in 0..n {
        if cols.is_empty() {
            break;
        }
        let rest_rows: Vec<usize> = rows.iter().copied().filter(|&r| r != i).collect();
        let chosen = cols.iter().copied().find(|&j| {
            let rest_cols: Vec<usize> = cols.iter().copied().filter(|&c| c != j).collect();
            fixed + cost[[i, j]] + optimum(cost, &rest_rows, &rest_cols) <= best + tol
        });
        if let Some(j) = chosen {
            fixed += cost[[i, j]];
            cols.retain(|&c| c != j);
            pairs.push((i, j));
        }
        rows = rest_rows;
    }
    pairs
}

/// Keeps the top-K* queries by foreground probability, where K* is the
/// count head's argmax, and returns their events sorted by start time.
pub fn decode_events(outputs: &QueryOutputs, duration: f64, vocab: &Vocabulary) -> Vec<EventPrediction> {
    let n = outputs.fg_logits.len();
    let k = (argmax(outputs.count_logits.iter().copied()) + 1).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| outputs.fg_logits[b].total_cmp(&outputs.fg_logits[a]).then(a.cmp(&b)));
    let mut events: Vec<(usize, EventPrediction)> = order[..k]
        .iter()
        .map(|&q| {
            (
                q,
                EventPrediction {
                    segment: denormalize(outputs.segments[[q, 0]], outputs.segments[[q, 1]], duration),
                    confidence: sigmoid(outputs.fg_logits[q]),
                    tokens: greedy_caption(outputs, q, vocab),
                },
            )
        })
        .collect();
    events.sort_by(|a, b| a.1.segment.start.total_cmp(&b.1.segment.start).then(a.0.cmp(&b.0)));
    events.into_iter().map(|(_, e)| e).collect()
}

/// Caption tokens of query `q`: per-step argmax up to the end marker.
pub fn greedy_caption(outputs: &QueryOutputs, q: usize, vocab: &Vocabulary) -> Vec<String> {
    let steps = outputs.caption_logits.index_axis(Axis(0), q);
    let ids: Vec<usize> = steps.rows().into_iter().map(|r| argmax(r.iter().copied())).collect();
    vocab.decode(&ids)
}

/// Maps a normalized (center, length) to a segment inside `[0, duration]`
/// with positive length.
pub fn denormalize(center: f64, length: f64, duration: f64) -> TimeSegment {
    let min_len = 1e-6 * duration;
    let mut start = ((center - 0.5 * length) * duration).clamp(0.0, duration);
    let mut end = ((center + 0.5 * length) * duration).clamp(0.0, duration);
    if end - start < min_len {
        if start + min_len <= duration {
            end = start + min_len;
        } else {
            end = duration;
            start = duration - min_len;
        }
    }
    TimeSegment::new(start, end)
}

/// For each ground-truth segment, the query whose predicted segment has
/// the highest tIoU with it (ties to the lowest query index).
pub fn assign_gt_proposals(outputs: &QueryOutputs, duration: f64, gt_segments: &[TimeSegment]) -> Vec<usize> {
    let preds: Vec<TimeSegment> = outputs
        .segments
        .rows()
        .into_iter()
        .map(|r| denormalize(r[0], r[1], duration))
        .collect();
    gt_segments
        .iter()
        .map(|g| argmax(preds.iter().map(|p| tiou(p, g))))
        .collect()
}

/// Captions for given ground-truth segments, each taken from the query
/// best overlapping it.
pub fn generate_with_gt_proposals(
    model: &CaptionModel,
    x: &Mat,
    gt_segments: &[TimeSegment],
    duration: f64,
    vocab: &Vocabulary,
) -> Result<Vec<Vec<String>>> {
    for s in gt_segments {
        s.validate(duration)?;
    }
    let outputs = model.infer(x)?;
    Ok(assign_gt_proposals(&outputs, duration, gt_segments)
        .into_iter()
        .map(|q| greedy_caption(&outputs, q, vocab))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens(["cut", "the", "onion"].map(String::from))
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_queries: 4,
            k_max: 5,
            heads: 2,
            ffn_dim: 16,
            max_caption_len: 5,
            query_window: 0.2,
            input_widths: vec![6],
        }
    }

    #[test]
    fn hungarian_small_cases() {
        assert_eq!(hungarian_match(&array![[0.0]]), vec![(0, 0)]);
        assert_eq!(hungarian_match(&array![[0.0, 1.0], [1.0, 0.0]]), vec![(0, 0), (1, 1)]);
        assert_eq!(hungarian_match(&array![[5.0], [1.0], [3.0]]), vec![(1, 0)]);
        assert_eq!(hungarian_match(&array![[5.0, 1.0, 3.0]]), vec![(0, 1)]);
    }

    #[test]
    fn hungarian_ties_are_lexicographic() {
        assert_eq!(hungarian_match(&Array2::zeros((2, 3))), vec![(0, 0), (1, 1)]);
        assert_eq!(hungarian_match(&Array2::zeros((3, 2))), vec![(0, 0), (1, 1)]);
        assert_eq!(hungarian_match(&array![[1.0, 1.0], [1.0, 1.0]]), vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn giou_cases() {
        assert_abs_diff_eq!(giou_1d((0.5, 0.2), (0.5, 0.2)), 1.0);
        // [0,0.2] vs [0.4,0.6]: iou 0, hull 0.6, union 0.4.
        assert_abs_diff_eq!(giou_1d((0.1, 0.2), (0.5, 0.2)), -(0.2 / 0.6), epsilon = 1e-12);
    }

    #[test]
    fn denormalize_stays_inside() {
        let s = denormalize(0.0, 0.0, 10.0);
        assert!(s.start >= 0.0 && s.end <= 10.0 && s.end > s.start);
        let s = denormalize(1.2, 0.5, 10.0);
        assert!(s.start >= 0.0 && s.end <= 10.0 && s.end > s.start);
        assert_eq!(denormalize(0.5, 0.2, 10.0), TimeSegment::new(4.0, 6.0));
    }

    #[test]
    fn converter_zero_convs_is_normalized_relu_of_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ModelConfig {
            d_model: 2,
            heads: 1,
            input_widths: vec![2],
            ..small_config()
        };
        let mut m = CaptionModel::new(cfg, 6, &mut rng).unwrap();
        for p in m.params.params_mut() {
            if p.name.starts_with("conv") {
                p.value.fill(0.0);
            }
        }
        *m.params.get_mut("conv.in2.w").unwrap() = Array2::eye(2);
        // relu rows [1, 0] and [0, 3], each normalized to zero mean, unit variance.
        let x = array![[1.0, -2.0], [-0.5, 3.0]];
        let y = m.convert_values(&x).unwrap();
        for (got, want) in y.iter().zip([1.0, -1.0, -1.0, 1.0]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-4);
        }
    }

    #[test]
    fn unregistered_width_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = CaptionModel::new(small_config(), 6, &mut rng).unwrap();
        let err = m.convert_values(&Array2::zeros((3, 7))).unwrap_err();
        assert!(err.to_string().contains("width 7"));
    }

    #[test]
    fn concatenated_projection_starts_from_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = CaptionModel::new(small_config(), 6, &mut rng).unwrap();
        m.register_input(24, &mut rng);
        let base = m.params.get("conv.in6.w").unwrap().clone();
        let wide = m.params.get("conv.in24.w").unwrap();
        assert_eq!(wide.slice(ndarray::s![..6, ..]), base);
        let mut widths = m.input_widths();
        widths.sort();
        assert_eq!(widths, vec![6, 24]);
    }

    #[test]
    fn forward_shapes_and_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = CaptionModel::new(small_config(), 7, &mut rng).unwrap();
        let x = Array2::from_shape_fn((16, 6), |(i, j)| ((i * 7 + j) as f64).sin());
        let out = m.infer(&x).unwrap();
        assert_eq!(out.segments.dim(), (4, 2));
        assert_eq!(out.fg_logits.len(), 4);
        assert_eq!(out.count_logits.len(), 5);
        assert_eq!(out.caption_logits.dim(), (4, 5, 7));
        assert!(out.segments.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    fn toy_outputs() -> QueryOutputs {
        // Two queries; query 1 sits exactly on the single event.
        let v = vocab();
        let steps = 4;
        let mut caption_logits = Array3::zeros((2, steps, v.len()));
        let target = caption_targets(&v, &["cut", "the", "onion"].map(String::from), steps);
        for (s, &tok) in target.iter().enumerate() {
            caption_logits[[1, s, tok]] = 2.0;
        }
        QueryOutputs {
            segments: array![[0.2, 0.1], [0.5, 0.4]],
            fg_logits: vec![0.0, 1.0],
            caption_logits,
            count_logits: vec![3.0, 0.0, 0.0],
        }
    }

    fn toy_gt() -> EventAnnotation {
        EventAnnotation::new(
            vec![TimeSegment::new(3.0, 7.0)],
            vec![["cut", "the", "onion"].map(String::from).to_vec()],
            10.0,
        )
        .unwrap()
    }

    #[test]
    fn task_loss_matches_hand_computation() {
        let v = vocab();
        let w = LossWeights::default();
        let c = task_loss(&toy_outputs(), &toy_gt(), &v, &w).unwrap();
        // Matched query 1 predicts the exact event.
        assert_abs_diff_eq!(c.loc, 0.0, epsilon = 1e-12);
        let sp = |x: f64| (1.0 + x.exp()).ln();
        let cls = 0.5 * (sp(0.0) + sp(-1.0));
        assert_abs_diff_eq!(c.cls, cls, epsilon = 1e-12);
        // Each of the 4 target steps: logit 2 on the target, 0 on 6 others.
        let cap = (6.0 + 2f64.exp()).ln() - 2.0;
        assert_abs_diff_eq!(c.cap, cap, epsilon = 1e-12);
        let cnt = (3f64.exp() + 2.0).ln() - 3.0;
        assert_abs_diff_eq!(c.cnt, cnt, epsilon = 1e-12);
        assert_abs_diff_eq!(c.total, 2.0 * 0.0 + cls + cap + 0.5 * cnt, epsilon = 1e-12);
    }

    #[test]
    fn saturated_count_logits_give_zero_count_loss() {
        let v = vocab();
        let mut o = toy_outputs();
        o.count_logits = vec![80.0, -80.0, -80.0];
        let c = task_loss(&o, &toy_gt(), &v, &LossWeights::default()).unwrap();
        assert!(c.cnt < 1e-30);
    }

    #[test]
    fn too_many_events_for_count_head() {
        let v = vocab();
        let mut o = toy_outputs();
        o.count_logits = vec![0.0];
        let gt = EventAnnotation::new(
            vec![TimeSegment::new(0.0, 1.0), TimeSegment::new(2.0, 3.0)],
            vec![vec!["cut".into()], vec!["onion".into()]],
            10.0,
        )
        .unwrap();
        assert!(task_loss(&o, &gt, &v, &LossWeights::default()).is_err());
    }

    fn scripted(fg: Vec<f64>, count_argmax: usize) -> QueryOutputs {
        let n = fg.len();
        let v = vocab();
        let mut count_logits = vec![0.0; 12];
        count_logits[count_argmax] = 5.0;
        QueryOutputs {
            segments: Array2::from_shape_fn((n, 2), |(i, k)| if k == 0 { 1.0 - (i as f64 + 0.5) / n as f64 } else { 0.05 }),
            fg_logits: fg,
            caption_logits: Array3::zeros((n, 3, v.len())),
            count_logits,
        }
    }

    #[test]
    fn decode_keeps_top_queries_in_time_order() {
        let v = vocab();
        let fg = vec![0.1, 2.0, -1.0, 0.5, 3.0, 0.0, 1.5, -2.0, 0.2, 0.3];
        let ev = decode_events(&scripted(fg, 2), 100.0, &v);
        // Top-3 by fg are queries 4, 1, 6; centers decrease with index.
        let centers: Vec<f64> = ev.iter().map(|e| e.segment.center()).collect();
        let expect: Vec<f64> = [6, 4, 1].iter().map(|&i| (1.0 - (i as f64 + 0.5) / 10.0) * 100.0).collect();
        for (c, e) in centers.iter().zip(&expect) {
            assert_abs_diff_eq!(c, e, epsilon = 1e-9);
        }
    }

    #[test]
    fn decode_ties_use_query_index() {
        let v = vocab();
        let ev = decode_events(&scripted(vec![0.0; 10], 0), 10.0, &v);
        assert_eq!(ev.len(), 1);
        assert_abs_diff_eq!(ev[0].segment.center(), (1.0 - 0.05) * 10.0, epsilon = 1e-9);
    }

    #[test]
    fn gt_proposal_assignment() {
        let mut o = scripted(vec![0.0; 3], 0);
        o.segments = array![[0.2, 0.2], [0.5, 0.2], [0.8, 0.2]];
        // Query segments are [1,3], [4,6], [7,9]; the last GT overlaps none.
        let gts = [TimeSegment::new(1.0, 3.0), TimeSegment::new(5.5, 8.0), TimeSegment::new(9.5, 10.0)];
        let a = assign_gt_proposals(&o, 10.0, &gts);
        // [5.5,8] vs [4,6]: 0.5/4 = 0.125; vs [7,9]: 1/3.5 = 0.2857.
        assert_eq!(a, vec![0, 2, 0]);
    }
}
