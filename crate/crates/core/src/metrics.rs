//! Caption and dense-captioning evaluation: tIoU, BLEU-4, an exact-match
//! METEOR, CIDEr-D, the thresholded dvc_eval protocol and SODA.
//!
//! The corpus-level BLEU and CIDEr-D routines reproduce the arithmetic of the
//! widely used coco-caption scorers (including their smoothing constants and
//! quirks) so that dvc_eval numbers are comparable with the published
//! evaluator when fed the same tokenized text.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{
    read_json, tokenize, write_bytes, write_json, EventAnnotation, EventPrediction, TimeSegment,
};
use crate::error::{Error, Result};

pub const DVC_THRESHOLDS: [f64; 4] = [0.3, 0.5, 0.7, 0.9];

const MAX_N: usize = 4;
const CIDER_SIGMA: f64 = 6.0;
const METEOR_ALPHA: f64 = 0.9;
const METEOR_BETA: f64 = 3.0;
const METEOR_GAMMA: f64 = 0.5;
/// Reference assigned to predictions that overlap no ground-truth event.
const UNMATCHED_REFERENCE: &str = "abc123!@#";

pub fn tiou(a: &TimeSegment, b: &TimeSegment) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.length() + b.length() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

type NgramCounts<'a> = HashMap<&'a [String], usize>;

fn ngram_counts(tokens: &[String], max_n: usize) -> NgramCounts<'_> {
    let mut counts = HashMap::new();
    for n in 1..=max_n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Reference length closest to `len`; ties go to the shorter reference.
fn closest_ref_len(len: usize, references: &[Vec<String>]) -> usize {
    references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| ((l as i64 - len as i64).abs(), l))
        .unwrap_or(0)
}

/// Clipped n-gram match counts `(correct, guess)` for n = 1..=4.
fn clipped_counts(candidate: &[String], references: &[Vec<String>]) -> ([usize; MAX_N], [usize; MAX_N]) {
    let mut max_ref: NgramCounts = HashMap::new();
    for r in references {
        for (g, c) in ngram_counts(r, MAX_N) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let mut correct = [0; MAX_N];
    for (g, c) in ngram_counts(candidate, MAX_N) {
        correct[g.len() - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
    }
    let guess = std::array::from_fn(|k| (candidate.len() + 1).saturating_sub(k + 1));
    (correct, guess)
}

/// Sentence-level BLEU-4. When a higher-order precision has no matches,
/// add-one smoothing is applied to all orders n >= 2.
pub fn bleu4(candidate: &[String], references: &[Vec<String>]) -> f64 {
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    let (correct, guess) = clipped_counts(candidate, references);
    if correct[0] == 0 {
        return 0.0;
    }
    let smooth = (1..MAX_N).any(|k| correct[k] == 0);
    let mut log_sum = (correct[0] as f64 / guess[0] as f64).ln();
    for k in 1..MAX_N {
        let p = if smooth {
            (correct[k] + 1) as f64 / (guess[k] + 1) as f64
        } else {
            correct[k] as f64 / guess[k] as f64
        };
        log_sum += p.ln();
    }
    let c = candidate.len() as f64;
    let r = closest_ref_len(candidate.len(), references) as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / MAX_N as f64).exp()
}

/// Corpus-level BLEU-1..4 over `(candidate, references)` pairs with the
/// coco-caption smoothing constants and "closest" reference length.
pub fn corpus_bleu(pairs: &[(&[String], &[Vec<String>])]) -> [f64; MAX_N] {
    const SMALL: f64 = 1e-9;
    const TINY: f64 = 1e-15;
    let mut correct = [0usize; MAX_N];
    let mut guess = [0usize; MAX_N];
    let mut test_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, refs) in pairs {
        let (c, g) = clipped_counts(cand, refs);
        for k in 0..MAX_N {
            correct[k] += c[k];
            guess[k] += g[k];
        }
        test_len += cand.len();
        ref_len += closest_ref_len(cand.len(), refs);
    }
    let mut out = [0.0; MAX_N];
    let mut prod = 1.0;
    for k in 0..MAX_N {
        prod *= (correct[k] as f64 + TINY) / (guess[k] as f64 + SMALL);
        out[k] = prod.powf(1.0 / (k + 1) as f64);
    }
    let ratio = (test_len as f64 + TINY) / (ref_len as f64 + SMALL);
    if ratio < 1.0 {
        for v in &mut out {
            *v *= (1.0 - 1.0 / ratio).exp();
        }
    }
    out
}

/// Minimum number of chunks over all maximum-cardinality exact alignments
/// between `cand` and `reference`, with the match count.
fn align_exact(cand: &[String], reference: &[String]) -> (usize, usize) {
    // Candidate positions with at least one reference position of the same token.
    let options: Vec<Vec<usize>> = cand
        .iter()
        .map(|c| {
            reference
                .iter()
                .enumerate()
                .filter(|(_, r)| *r == c)
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    let mut cand_counts: HashMap<&str, usize> = HashMap::new();
    let mut ref_counts: HashMap<&str, usize> = HashMap::new();
    for c in cand {
        *cand_counts.entry(c).or_default() += 1;
    }
    for r in reference {
        *ref_counts.entry(r).or_default() += 1;
    }
    let matches: usize = cand_counts
        .iter()
        .map(|(t, &c)| c.min(ref_counts.get(t).copied().unwrap_or(0)))
        .sum();
    if matches == 0 {
        return (0, 0);
    }
    // Tokens still to be matched, per token type.
    let mut remaining: HashMap<&str, usize> = cand_counts
        .iter()
        .map(|(t, &c)| (*t, c.min(ref_counts.get(t).copied().unwrap_or(0))))
        .collect();
    let mut left_of: HashMap<&str, usize> = cand_counts.clone();

    struct Search<'a> {
        cand: &'a [String],
        options: &'a [Vec<usize>],
        used: Vec<bool>,
        best: usize,
        budget: usize,
    }

    fn dfs<'a>(
        s: &mut Search<'a>,
        i: usize,
        prev: Option<usize>,
        chunks: usize,
        remaining: &mut HashMap<&'a str, usize>,
        left_of: &mut HashMap<&'a str, usize>,
    ) {
        if chunks >= s.best || s.budget == 0 {
            return;
        }
        s.budget -= 1;
        if i == s.cand.len() {
            s.best = chunks;
            return;
        }
        let tok = s.cand[i].as_str();
        let need = remaining.get(tok).copied().unwrap_or(0);
        let left = left_of[tok];
        *left_of.get_mut(tok).unwrap() -= 1;
        if need > 0 {
            // Prefer continuing the current chunk.
            let mut order: Vec<usize> = s.options[i].iter().copied().filter(|&j| !s.used[j]).collect();
            if let Some(p) = prev {
                if let Some(pos) = order.iter().position(|&j| j == p + 1) {
                    order.swap(0, pos);
                }
            }
            for j in order {
                s.used[j] = true;
                *remaining.get_mut(tok).unwrap() -= 1;
                let extra = usize::from(prev.is_none_or(|p| p + 1 != j));
                dfs(s, i + 1, Some(j), chunks + extra, remaining, left_of);
                *remaining.get_mut(tok).unwrap() += 1;
                s.used[j] = false;
            }
        }
        // Skipping is only allowed if enough occurrences remain to reach the maximum.
        if left > need {
            dfs(s, i + 1, None, chunks, remaining, left_of);
        }
        *left_of.get_mut(tok).unwrap() += 1;
    }

    let mut search = Search {
        cand,
        options: &options,
        used: vec![false; reference.len()],
        best: usize::MAX,
        budget: 200_000,
    };
    dfs(&mut search, 0, None, 0, &mut remaining, &mut left_of);
    let chunks = if search.best == usize::MAX { matches } else { search.best };
    (matches, chunks)
}

/// METEOR restricted to exact unigram matching (alpha 0.9, beta 3,
/// gamma 0.5); maximum over references.
pub fn meteor_lite(candidate: &[String], references: &[Vec<String>]) -> f64 {
    references
        .iter()
        .map(|r| meteor_single(candidate, r))
        .fold(0.0, f64::max)
}

fn meteor_single(candidate: &[String], reference: &[String]) -> f64 {
    let (m, chunks) = align_exact(candidate, reference);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * (chunks as f64 / m as f64).powf(METEOR_BETA);
    f_mean * (1.0 - penalty)
}

/// Document frequencies for CIDEr-D, built from a reference corpus in
/// which each entry (the references of one item) is one document.
pub struct CiderIdf {
    doc_freq: HashMap<Vec<String>, f64>,
    log_ref_len: f64,
}

struct TfIdf {
    vec: [HashMap<Vec<String>, f64>; MAX_N],
    norm: [f64; MAX_N],
    length: f64,
}

impl CiderIdf {
    pub fn new(documents: &[Vec<Vec<String>>]) -> Self {
        let mut doc_freq: HashMap<Vec<String>, f64> = HashMap::new();
        for refs in documents {
            let mut seen: std::collections::HashSet<&[String]> = Default::default();
            for r in refs {
                for g in ngram_counts(r, MAX_N).into_keys() {
                    seen.insert(g);
                }
            }
            for g in seen {
                *doc_freq.entry(g.to_vec()).or_insert(0.0) += 1.0;
            }
        }
        CiderIdf {
            doc_freq,
            log_ref_len: (documents.len() as f64).ln(),
        }
    }

    fn tfidf(&self, tokens: &[String]) -> TfIdf {
        let mut vec: [HashMap<Vec<String>, f64>; MAX_N] = Default::default();
        let mut norm = [0.0; MAX_N];
        let mut length = 0.0;
        for (g, tf) in ngram_counts(tokens, MAX_N) {
            let df = self.doc_freq.get(g).copied().unwrap_or(0.0).max(1.0).ln();
            let n = g.len() - 1;
            let w = tf as f64 * (self.log_ref_len - df);
            norm[n] += w * w;
            vec[n].insert(g.to_vec(), w);
            // coco-caption measures length by the bigram count.
            if n == 1 {
                length += tf as f64;
            }
        }
        for v in &mut norm {
            *v = v.sqrt();
        }
        TfIdf { vec, norm, length }
    }

    fn sim(hyp: &TfIdf, rf: &TfIdf) -> [f64; MAX_N] {
        let delta = hyp.length - rf.length;
        let mut val = [0.0; MAX_N];
        for n in 0..MAX_N {
            for (g, &w) in &hyp.vec[n] {
                let r = rf.vec[n].get(g).copied().unwrap_or(0.0);
                val[n] += w.min(r) * r;
            }
            if hyp.norm[n] != 0.0 && rf.norm[n] != 0.0 {
                val[n] /= hyp.norm[n] * rf.norm[n];
            }
            val[n] *= (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        }
        val
    }

    /// CIDEr-D of one candidate against its references.
    pub fn score(&self, candidate: &[String], references: &[Vec<String>]) -> f64 {
        if references.is_empty() {
            return 0.0;
        }
        let hyp = self.tfidf(candidate);
        let mut acc = [0.0; MAX_N];
        for r in references {
            let s = Self::sim(&hyp, &self.tfidf(r));
            for n in 0..MAX_N {
                acc[n] += s[n];
            }
        }
        let mean = acc.iter().sum::<f64>() / MAX_N as f64;
        mean / references.len() as f64 * 10.0
    }
}

/// Per-item CIDEr-D with document frequencies taken from `references`.
pub fn cider(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<Vec<f64>> {
    if candidates.len() != references.len() {
        return Err(Error::Shape(format!(
            "{} candidates but {} reference lists",
            candidates.len(),
            references.len()
        )));
    }
    if references.len() < 2 {
        return Err(Error::Validation(
            "degenerate IDF: CIDEr needs at least two documents".into(),
        ));
    }
    Ok(cider_unchecked(candidates, references))
}

fn cider_unchecked(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Vec<f64> {
    let idf = CiderIdf::new(references);
    candidates
        .iter()
        .zip(references)
        .map(|(c, r)| idf.score(c, r))
        .collect()
}

/// Caption-level scores averaged first over the videos of one threshold
/// and then over thresholds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DvcScores {
    pub bleu4: f64,
    pub meteor: f64,
    pub cider: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DvcEvalResult {
    pub overall: DvcScores,
    pub per_threshold: Vec<(f64, DvcScores)>,
    pub per_video: BTreeMap<String, DvcScores>,
}

/// The dvc_eval protocol. For each threshold, every prediction is paired
/// with each reference event it overlaps at tIoU >= threshold (a prediction
/// with no such event is paired with a placeholder reference and scores 0).
/// BLEU-4 and CIDEr-D are computed over the pairs of one video, METEOR is
/// the mean over pairs, videos without predictions score 0.
pub fn dvc_eval(
    predictions: &BTreeMap<String, Vec<EventPrediction>>,
    references: &BTreeMap<String, EventAnnotation>,
    thresholds: &[f64],
) -> DvcEvalResult {
    let placeholder = tokenize(UNMATCHED_REFERENCE);
    let mut per_threshold = Vec::with_capacity(thresholds.len());
    let mut per_video_acc: BTreeMap<String, DvcScores> = BTreeMap::new();
    for &thr in thresholds {
        let mut sum = DvcScores::default();
        for (vid, gt) in references {
            let mut cands: Vec<Vec<String>> = Vec::new();
            let mut refs: Vec<Vec<Vec<String>>> = Vec::new();
            for pred in predictions.get(vid).map(Vec::as_slice).unwrap_or(&[]) {
                let mut added = false;
                for (seg, sent) in gt.segments.iter().zip(&gt.sentences) {
                    if tiou(&pred.segment, seg) >= thr {
                        cands.push(pred.tokens.clone());
                        refs.push(vec![sent.clone()]);
                        added = true;
                    }
                }
                if !added {
                    cands.push(pred.tokens.clone());
                    refs.push(vec![placeholder.clone()]);
                }
            }
            let scores = if cands.is_empty() {
                DvcScores::default()
            } else {
                let pairs: Vec<(&[String], &[Vec<String>])> = cands
                    .iter()
                    .zip(&refs)
                    .map(|(c, r)| (c.as_slice(), r.as_slice()))
                    .collect();
                let b = corpus_bleu(&pairs)[3];
                let m = cands
                    .iter()
                    .zip(&refs)
                    .map(|(c, r)| meteor_lite(c, r))
                    .sum::<f64>()
                    / cands.len() as f64;
                let cs = cider_unchecked(&cands, &refs);
                let c = cs.iter().sum::<f64>() / cs.len() as f64;
                DvcScores {
                    bleu4: b,
                    meteor: m,
                    cider: c,
                }
            };
            sum.bleu4 += scores.bleu4;
            sum.meteor += scores.meteor;
            sum.cider += scores.cider;
            let acc = per_video_acc.entry(vid.clone()).or_default();
            acc.bleu4 += scores.bleu4 / thresholds.len() as f64;
            acc.meteor += scores.meteor / thresholds.len() as f64;
            acc.cider += scores.cider / thresholds.len() as f64;
        }
        let nv = references.len().max(1) as f64;
        per_threshold.push((
            thr,
            DvcScores {
                bleu4: sum.bleu4 / nv,
                meteor: sum.meteor / nv,
                cider: sum.cider / nv,
            },
        ));
    }
    let nt = per_threshold.len().max(1) as f64;
    let overall = per_threshold.iter().fold(DvcScores::default(), |acc, (_, s)| DvcScores {
        bleu4: acc.bleu4 + s.bleu4 / nt,
        meteor: acc.meteor + s.meteor / nt,
        cider: acc.cider + s.cider / nt,
    });
    DvcEvalResult {
        overall,
        per_threshold,
        per_video: per_video_acc,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SodaMetric {
    Meteor,
    Cider,
    Tiou,
}

/// Maximum total score over order-preserving one-to-one matchings between
/// rows and columns of `scores`.
pub fn soda_dp(scores: &[Vec<f64>]) -> f64 {
    let n = scores.len();
    let m = scores.first().map_or(0, Vec::len);
    let mut dp = vec![vec![0.0f64; m + 1]; n + 1];
    for i in 1..=n {
        for j in 1..=m {
            dp[i][j] = dp[i - 1][j]
                .max(dp[i][j - 1])
                .max(dp[i - 1][j - 1] + scores[i - 1][j - 1]);
        }
    }
    dp[n][m]
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SodaResult {
    pub f_score: f64,
    pub per_video: BTreeMap<String, f64>,
}

/// SODA: per video, pair scores are tIoU times the caption metric (or tIoU
/// alone), matched by [`soda_dp`]; the F-measure of the matched total is
/// averaged over reference videos. CIDEr document frequencies come from
/// every reference caption of the corpus.
pub fn soda(
    predictions: &BTreeMap<String, Vec<EventPrediction>>,
    references: &BTreeMap<String, EventAnnotation>,
    metric: SodaMetric,
) -> Result<SodaResult> {
    let idf = if metric == SodaMetric::Cider {
        let docs: Vec<Vec<Vec<String>>> = references
            .values()
            .flat_map(|a| a.sentences.iter().map(|s| vec![s.clone()]))
            .collect();
        if docs.len() < 2 {
            return Err(Error::Validation(
                "degenerate IDF: SODA-CIDEr needs at least two reference captions".into(),
            ));
        }
        Some(CiderIdf::new(&docs))
    } else {
        None
    };
    let mut per_video = BTreeMap::new();
    for (vid, gt) in references {
        let mut preds: Vec<&EventPrediction> =
            predictions.get(vid).map(|p| p.iter().collect()).unwrap_or_default();
        preds.sort_by(|a, b| a.segment.start.total_cmp(&b.segment.start));
        let f = if preds.is_empty() {
            0.0
        } else {
            let scores: Vec<Vec<f64>> = preds
                .iter()
                .map(|p| {
                    gt.segments
                        .iter()
                        .zip(&gt.sentences)
                        .map(|(seg, sent)| {
                            let iou = tiou(&p.segment, seg);
                            let refs = std::slice::from_ref(sent);
                            match metric {
                                SodaMetric::Tiou => iou,
                                SodaMetric::Meteor => iou * meteor_lite(&p.tokens, refs),
                                SodaMetric::Cider => {
                                    iou * idf.as_ref().map_or(0.0, |i| i.score(&p.tokens, refs))
                                }
                            }
                        })
                        .collect()
                })
                .collect();
            let total = soda_dp(&scores);
            let precision = total / preds.len() as f64;
            let recall = total / gt.len() as f64;
            if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            }
        };
        per_video.insert(vid.clone(), f);
    }
    let f_score = if per_video.is_empty() {
        0.0
    } else {
        per_video.values().sum::<f64>() / per_video.len() as f64
    };
    Ok(SodaResult { f_score, per_video })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SodaScores {
    pub meteor: f64,
    pub cider: f64,
    pub tiou: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VideoBreakdown {
    pub dvc_eval: DvcScores,
    pub soda: SodaScores,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dvc_eval: DvcScores,
    pub soda: SodaScores,
    pub per_video: BTreeMap<String, VideoBreakdown>,
}

impl MetricReport {
    /// Model-selection criterion: dvc_eval METEOR plus SODA METEOR.
    pub fn sum_meteor(&self) -> f64 {
        self.dvc_eval.meteor + self.soda.meteor
    }

    pub const SUMMARY_HEADER: &'static str =
        "dvc_B4\tdvc_METEOR\tdvc_CIDEr\tsoda_METEOR\tsoda_CIDEr\tsoda_tIoU";

    pub fn summary_row(&self) -> String {
        format!(
            "{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.dvc_eval.bleu4,
            self.dvc_eval.meteor,
            self.dvc_eval.cider,
            self.soda.meteor,
            self.soda.cider,
            self.soda.tiou
        )
    }

    pub fn write(&self, json_path: &Path) -> Result<()> {
        write_json(json_path, self)?;
        let tsv = format!("{}\n{}\n", Self::SUMMARY_HEADER, self.summary_row());
        write_bytes(&json_path.with_extension("tsv"), tsv.as_bytes())
    }
}

/// Runs dvc_eval at the standard thresholds and all three SODA variants.
/// SODA-CIDEr is reported as 0 when the reference corpus has fewer than two
/// captions.
pub fn evaluate(
    predictions: &BTreeMap<String, Vec<EventPrediction>>,
    references: &BTreeMap<String, EventAnnotation>,
) -> MetricReport {
    let dvc = dvc_eval(predictions, references, &DVC_THRESHOLDS);
    let meteor = soda(predictions, references, SodaMetric::Meteor).unwrap_or_default();
    let cider = soda(predictions, references, SodaMetric::Cider).unwrap_or_default();
    let tiou_r = soda(predictions, references, SodaMetric::Tiou).unwrap_or_default();
    let per_video = references
        .keys()
        .map(|vid| {
            let get = |r: &SodaResult| r.per_video.get(vid).copied().unwrap_or(0.0);
            (
                vid.clone(),
                VideoBreakdown {
                    dvc_eval: dvc.per_video.get(vid).copied().unwrap_or_default(),
                    soda: SodaScores {
                        meteor: get(&meteor),
                        cider: get(&cider),
                        tiou: get(&tiou_r),
                    },
                },
            )
        })
        .collect();
    MetricReport {
        dvc_eval: dvc.overall,
        soda: SodaScores {
            meteor: meteor.f_score,
            cider: cider.f_score,
            tiou: tiou_r.f_score,
        },
        per_video,
    }
}

/// On-disk prediction entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub segment: [f64; 2],
    pub confidence: f64,
    pub sentence: String,
}

pub fn read_predictions(path: &Path) -> Result<BTreeMap<String, Vec<EventPrediction>>> {
    let raw: BTreeMap<String, Vec<PredictionRecord>> = read_json(path)?;
    Ok(raw
        .into_iter()
        .map(|(vid, recs)| {
            let preds = recs
                .into_iter()
                .map(|r| EventPrediction {
                    segment: TimeSegment::new(r.segment[0], r.segment[1]),
                    confidence: r.confidence,
                    tokens: tokenize(&r.sentence),
                })
                .collect();
            (vid, preds)
        })
        .collect())
}

pub fn write_predictions(path: &Path, preds: &BTreeMap<String, Vec<EventPrediction>>) -> Result<()> {
    let raw: BTreeMap<&String, Vec<PredictionRecord>> = preds
        .iter()
        .map(|(vid, ps)| {
            (
                vid,
                ps.iter()
                    .map(|p| PredictionRecord {
                        segment: [p.segment.start, p.segment.end],
                        confidence: p.confidence,
                        sentence: p.tokens.join(" "),
                    })
                    .collect(),
            )
        })
        .collect();
    write_json(path, &raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn tiou_examples() {
        let a = TimeSegment::new(0.0, 10.0);
        assert_eq!(tiou(&a, &a), 1.0);
        assert_eq!(tiou(&a, &TimeSegment::new(20.0, 30.0)), 0.0);
        assert_abs_diff_eq!(tiou(&a, &TimeSegment::new(5.0, 15.0)), 5.0 / 15.0, epsilon = 1e-12);
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let s = toks("cut the bread into small pieces");
        assert_abs_diff_eq!(bleu4(&s, std::slice::from_ref(&s)), 1.0, epsilon = 1e-12);
        let short = toks("stir");
        assert_abs_diff_eq!(bleu4(&short, std::slice::from_ref(&short)), 1.0, epsilon = 1e-12);
        assert_eq!(bleu4(&toks("a b c"), &[toks("x y z")]), 0.0);
        assert_eq!(bleu4(&[], &[toks("x")]), 0.0);
    }

    #[test]
    fn meteor_examples() {
        assert_abs_diff_eq!(meteor_lite(&toks("a"), &[toks("a")]), 0.5, epsilon = 1e-12);
        assert_eq!(meteor_lite(&toks("a b"), &[toks("c d")]), 0.0);
        let ten = toks("one two three four five six seven eight nine ten");
        assert_abs_diff_eq!(meteor_lite(&ten, std::slice::from_ref(&ten)), 0.9995, epsilon = 1e-12);
    }

    #[test]
    fn meteor_prefers_fewest_chunks() {
        // "the cat" can align to either "the"; the contiguous one gives 1 chunk.
        let (m, ch) = align_exact(&toks("the cat"), &toks("the dog saw the cat"));
        assert_eq!((m, ch), (2, 1));
        let (m, ch) = align_exact(&toks("b a"), &toks("a b"));
        assert_eq!((m, ch), (2, 2));
    }

    #[test]
    fn cider_zero_for_disjoint_and_degenerate_error() {
        let c = vec![toks("x y"), toks("cut the bread")];
        let r = vec![vec![toks("pour the oil")], vec![toks("cut the bread")]];
        let s = cider(&c, &r).unwrap();
        assert_eq!(s[0], 0.0);
        assert!(s[1] > 0.0);
        assert!(cider(&c[..1], &r[..1]).is_err());
    }

    #[test]
    fn cider_symmetry() {
        let c = vec![toks("cut the bread"), toks("pour the oil")];
        let r = vec![vec![toks("cut the bread")], vec![toks("pour the oil")]];
        let s = cider(&c, &r).unwrap();
        assert_abs_diff_eq!(s[0], s[1], epsilon = 1e-12);
    }

    #[test]
    fn soda_dp_small() {
        // Order-preserving: cannot take both 0.9 entries on the anti-diagonal.
        let s = vec![vec![0.0, 0.9], vec![0.9, 0.0]];
        assert_abs_diff_eq!(soda_dp(&s), 0.9, epsilon = 1e-12);
        let s = vec![vec![0.5, 0.1], vec![0.1, 0.5]];
        assert_abs_diff_eq!(soda_dp(&s), 1.0, epsilon = 1e-12);
    }

    fn single(seg: (f64, f64), sent: &str) -> (BTreeMap<String, Vec<EventPrediction>>, BTreeMap<String, EventAnnotation>) {
        let s = TimeSegment::new(seg.0, seg.1);
        let preds = BTreeMap::from([(
            "v".to_string(),
            vec![EventPrediction {
                segment: s,
                confidence: 1.0,
                tokens: toks(sent),
            }],
        )]);
        let refs = BTreeMap::from([(
            "v".to_string(),
            EventAnnotation::new(vec![TimeSegment::new(0.0, 10.0)], vec![toks(sent)], 20.0).unwrap(),
        )]);
        (preds, refs)
    }

    #[test]
    fn soda_single_identity() {
        let (p, r) = single((0.0, 10.0), "add the salt");
        let m = soda(&p, &r, SodaMetric::Meteor).unwrap();
        let expect = meteor_lite(&toks("add the salt"), &[toks("add the salt")]);
        assert_abs_diff_eq!(m.f_score, expect, epsilon = 1e-12);
        assert_abs_diff_eq!(soda(&p, &r, SodaMetric::Tiou).unwrap().f_score, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn soda_and_dvc_zero_when_disjoint() {
        let (p, r) = single((12.0, 20.0), "add the salt");
        assert_eq!(soda(&p, &r, SodaMetric::Meteor).unwrap().f_score, 0.0);
        let d = dvc_eval(&p, &r, &[0.3]);
        assert!(d.overall.bleu4 < 1e-6);
        assert_eq!(d.overall.meteor, 0.0);
        assert_eq!(d.overall.cider, 0.0);
    }

    #[test]
    fn dvc_identity_reduces_to_caption_metric() {
        let (p, r) = single((0.0, 10.0), "add the salt to the pot");
        let d = dvc_eval(&p, &r, &DVC_THRESHOLDS);
        let sent = toks("add the salt to the pot");
        let m = meteor_lite(&sent, std::slice::from_ref(&sent));
        assert_abs_diff_eq!(d.overall.meteor, m, epsilon = 1e-12);
        assert_abs_diff_eq!(d.overall.bleu4, 1.0, epsilon = 1e-6);
        for (_, s) in &d.per_threshold {
            assert_abs_diff_eq!(s.meteor, m, epsilon = 1e-12);
        }
    }

    #[test]
    fn prediction_file_round_trip() {
        let (p, _) = single((1.0, 2.5), "add the salt");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        write_predictions(&path, &p).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), p);
    }
}
