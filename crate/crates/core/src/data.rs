//! Domain types, dataset containers, file I/O, tokenization and temporal
//! normalization shared by the rest of the crate.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A closed interval of video time, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeSegment {
    pub start: f64,
    pub end: f64,
}

impl TimeSegment {
    pub fn new(start: f64, end: f64) -> Self {
        TimeSegment { start, end }
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    /// Checks `0 <= start < end <= duration`.
    pub fn validate(&self, duration: f64) -> Result<()> {
        if !(self.start.is_finite() && self.end.is_finite()) {
            return Err(Error::Validation(format!("non-finite segment {self}")));
        }
        if self.end <= self.start {
            return Err(Error::Validation(format!(
                "empty segment {self}: end must exceed start"
            )));
        }
        if self.start < 0.0 || self.end > duration + 1e-9 {
            return Err(Error::Validation(format!(
                "segment {self} outside [0, {duration}]"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for TimeSegment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.start, self.end)
    }
}

/// Ground-truth dense captions for one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventAnnotation {
    pub segments: Vec<TimeSegment>,
    pub sentences: Vec<Vec<String>>,
    pub duration: f64,
}

impl EventAnnotation {
    /// Builds an annotation, sorting events by start time and validating
    /// every segment.
    pub fn new(
        segments: Vec<TimeSegment>,
        sentences: Vec<Vec<String>>,
        duration: f64,
    ) -> Result<Self> {
        if segments.len() != sentences.len() {
            return Err(Error::Validation(format!(
                "{} segments but {} sentences",
                segments.len(),
                sentences.len()
            )));
        }
        if segments.is_empty() {
            return Err(Error::Validation("annotation has no events".into()));
        }
        if !(duration.is_finite() && duration > 0.0) {
            return Err(Error::Validation(format!("invalid duration {duration}")));
        }
        for s in &segments {
            s.validate(duration)?;
        }
        let mut events: Vec<_> = segments.into_iter().zip(sentences).collect();
        events.sort_by(|a, b| a.0.start.total_cmp(&b.0.start));
        let (segments, sentences) = events.into_iter().unzip();
        Ok(EventAnnotation {
            segments,
            sentences,
            duration,
        })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// One predicted dense caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventPrediction {
    pub segment: TimeSegment,
    pub confidence: f64,
    pub tokens: Vec<String>,
}

/// Fixed-length frame features for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatures {
    pub frames: Array2<f64>,
    /// Video time (seconds) of each row.
    pub timestamps: Vec<f64>,
}

impl VideoFeatures {
    /// Resamples raw `T x d` features captured at `fps` to `t` rows.
    pub fn from_raw(raw: ArrayView2<f64>, t: usize, fps: f64) -> Result<Self> {
        let (frames, positions) = resample_features(raw, t)?;
        let timestamps = positions.iter().map(|p| p / fps).collect();
        Ok(VideoFeatures { frames, timestamps })
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.frames.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum ViewLabel {
    Exo = 0,
    EgoLike = 1,
    Ego = 2,
}

impl ViewLabel {
    pub const ALL: [ViewLabel; 3] = [ViewLabel::Exo, ViewLabel::EgoLike, ViewLabel::Ego];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn allowed_in(self, domain: Domain) -> bool {
        match domain {
            Domain::Source => self != ViewLabel::Ego,
            Domain::Target => self == ViewLabel::Ego,
        }
    }
}

impl TryFrom<u8> for ViewLabel {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(ViewLabel::Exo),
            1 => Ok(ViewLabel::EgoLike),
            2 => Ok(ViewLabel::Ego),
            other => Err(format!("view label {other} not in {{0,1,2}}")),
        }
    }
}

impl From<ViewLabel> for u8 {
    fn from(v: ViewLabel) -> u8 {
        v as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub video_id: String,
    pub split: Split,
    pub annotation: EventAnnotation,
    pub features: Option<VideoFeatures>,
    pub views: Option<Vec<ViewLabel>>,
}

impl DatasetItem {
    pub fn features(&self) -> Result<&VideoFeatures> {
        self.features
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("{}: features not attached", self.video_id)))
    }

    pub fn views(&self) -> Result<&[ViewLabel]> {
        self.views
            .as_deref()
            .ok_or_else(|| Error::Validation(format!("{}: view track not attached", self.video_id)))
    }
}

/// Annotated videos of one domain, sorted by video id.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub domain: Domain,
    pub items: Vec<DatasetItem>,
}

impl LabeledDataset {
    pub fn new(domain: Domain, mut items: Vec<DatasetItem>) -> Result<Self> {
        items.sort_by(|a, b| a.video_id.cmp(&b.video_id));
        let ds = LabeledDataset { domain, items };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn split(&self, split: Split) -> LabeledDataset {
        LabeledDataset {
            domain: self.domain,
            items: self.items.iter().filter(|i| i.split == split).cloned().collect(),
        }
    }

    /// Checks view-track domain restrictions and feature/track lengths.
    pub fn validate(&self) -> Result<()> {
        for item in &self.items {
            if let Some(views) = &item.views {
                if let Some(bad) = views.iter().find(|v| !v.allowed_in(self.domain)) {
                    return Err(Error::Validation(format!(
                        "{}: view {:?} not allowed in {} domain",
                        item.video_id, bad, self.domain
                    )));
                }
                if let Some(f) = &item.features {
                    if f.len() != views.len() {
                        return Err(Error::Validation(format!(
                            "{}: {} feature rows but {} view labels",
                            item.video_id,
                            f.len(),
                            views.len()
                        )));
                    }
                }
            }
            if let Some(f) = &item.features {
                if f.frames.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Validation(format!(
                        "{}: non-finite feature value",
                        item.video_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Resamples every attached feature matrix (and view track) to `t` rows.
    /// View labels follow the nearest source frame; timestamps are
    /// interpolated.
    pub fn resampled(&self, t: usize) -> Result<LabeledDataset> {
        let mut items = Vec::with_capacity(self.items.len());
        for item in &self.items {
            let mut item = item.clone();
            if let Some(f) = &item.features {
                let raw_len = f.len();
                let (frames, positions) = resample_features(f.frames.view(), t)?;
                if let Some(views) = &item.views {
                    if views.len() != raw_len {
                        return Err(Error::Validation(format!(
                            "{}: view track length {} != {} frames",
                            item.video_id,
                            views.len(),
                            raw_len
                        )));
                    }
                    item.views = Some(
                        positions
                            .iter()
                            .map(|p| views[(p.round() as usize).min(raw_len - 1)])
                            .collect(),
                    );
                }
                let ts = &f.timestamps;
                let timestamps = positions
                    .iter()
                    .map(|&p| {
                        let lo = (p.floor() as usize).min(raw_len - 1);
                        let hi = (lo + 1).min(raw_len - 1);
                        let frac = p - lo as f64;
                        match (ts.get(lo), ts.get(hi)) {
                            (Some(a), Some(b)) => a + frac * (b - a),
                            _ => p,
                        }
                    })
                    .collect();
                item.features = Some(VideoFeatures { frames, timestamps });
            }
            items.push(item);
        }
        LabeledDataset::new(self.domain, items)
    }
}

/// Frame representation: full-frame features, stabilized crop, or crop
/// plus hand and two object regions concatenated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Representation {
    #[default]
    #[serde(rename = "V")]
    V,
    #[serde(rename = "VC")]
    Vc,
    #[serde(rename = "VC+HO")]
    VcHo,
}

impl Representation {
    /// Number of `d`-wide blocks in the feature row.
    pub fn blocks(self) -> usize {
        match self {
            Representation::V | Representation::Vc => 1,
            Representation::VcHo => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Representation::V => "V",
            Representation::Vc => "VC",
            Representation::VcHo => "VC+HO",
        }
    }
}

impl std::str::FromStr for Representation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "V" => Ok(Representation::V),
            "VC" => Ok(Representation::Vc),
            "VC+HO" | "VCHO" => Ok(Representation::VcHo),
            _ => Err(Error::Validation(format!("unknown representation {s:?} (expected V, VC or VC+HO)"))),
        }
    }
}

/// On-disk annotation record. The file is a JSON object keyed by video id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub duration: f64,
    pub timestamps: Vec<[f64; 2]>,
    pub sentences: Vec<String>,
    pub domain: Domain,
    pub split: Split,
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Runtime(format!("serializing {}: {e}", path.display())))?;
    write_bytes(path, text.as_bytes())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads the annotations of one domain. Features and view tracks are
/// attached later.
pub fn load_annotations(path: &Path, domain: Domain) -> Result<LabeledDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: BTreeMap<String, serde_json::Value> = serde_json::from_str(&text)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    let mut items = Vec::new();
    for (video_id, value) in raw {
        let record: AnnotationRecord = serde_json::from_value(value)
            .map_err(|e| Error::parse(format!("video {video_id}"), e.to_string()))?;
        if record.domain != domain {
            continue;
        }
        items.push(item_from_record(&video_id, &record)?);
    }
    LabeledDataset::new(domain, items)
}

pub fn item_from_record(video_id: &str, record: &AnnotationRecord) -> Result<DatasetItem> {
    let segments = record
        .timestamps
        .iter()
        .map(|[s, e]| TimeSegment::new(*s, *e))
        .collect();
    let sentences = record.sentences.iter().map(|s| tokenize(s)).collect();
    let annotation = EventAnnotation::new(segments, sentences, record.duration)
        .map_err(|e| Error::Validation(format!("video {video_id}, field timestamps: {e}")))?;
    Ok(DatasetItem {
        video_id: video_id.to_string(),
        split: record.split,
        annotation,
        features: None,
        views: None,
    })
}

pub fn annotation_records(datasets: &[&LabeledDataset]) -> BTreeMap<String, AnnotationRecord> {
    let mut out = BTreeMap::new();
    for ds in datasets {
        for item in &ds.items {
            let a = &item.annotation;
            out.insert(
                item.video_id.clone(),
                AnnotationRecord {
                    duration: a.duration,
                    timestamps: a.segments.iter().map(|s| [s.start, s.end]).collect(),
                    sentences: a.sentences.iter().map(|s| s.join(" ")).collect(),
                    domain: ds.domain,
                    split: item.split,
                },
            );
        }
    }
    out
}

/// Sidecar written next to each raw feature file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSidecar {
    pub video_id: String,
    #[serde(rename = "T")]
    pub t: usize,
    pub d: usize,
    pub fps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
}

pub fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

/// Writes a row-major little-endian f32 matrix plus its JSON sidecar.
pub fn write_features(bin: &Path, frames: ArrayView2<f64>, sidecar: &FeatureSidecar) -> Result<()> {
    if sidecar.t != frames.nrows() || sidecar.d != frames.ncols() {
        return Err(Error::Shape(format!(
            "sidecar says {}x{} but matrix is {}x{}",
            sidecar.t,
            sidecar.d,
            frames.nrows(),
            frames.ncols()
        )));
    }
    let mut bytes = Vec::with_capacity(frames.len() * 4);
    for row in frames.rows() {
        for &v in row {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_bytes(bin, &bytes)?;
    write_json(&sidecar_path(bin), sidecar)
}

pub fn read_features(bin: &Path) -> Result<(Array2<f64>, FeatureSidecar)> {
    let sidecar: FeatureSidecar = read_json(&sidecar_path(bin))?;
    let bytes = fs::read(bin).map_err(|e| Error::io(bin, e))?;
    if bytes.len() != sidecar.t * sidecar.d * 4 {
        return Err(Error::parse(
            bin.display().to_string(),
            format!(
                "expected {} bytes for {}x{} f32, found {}",
                sidecar.t * sidecar.d * 4,
                sidecar.t,
                sidecar.d,
                bytes.len()
            ),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let frames = Array2::from_shape_vec((sidecar.t, sidecar.d), values)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok((frames, sidecar))
}

pub fn read_view_track(path: &Path) -> Result<Vec<ViewLabel>> {
    read_json(path)
}

pub fn write_view_track(path: &Path, views: &[ViewLabel]) -> Result<()> {
    let text = serde_json::to_string(views).map_err(|e| Error::Runtime(e.to_string()))?;
    write_bytes(path, text.as_bytes())
}

/// Lowercases, isolates every punctuation character as its own token and
/// splits on whitespace.
pub fn tokenize(sentence: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in sentence.chars() {
        if c.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(c.to_lowercase().collect());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token/index map shared by both domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// `tokens` excludes the reserved entries, which always occupy 0..4.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        Vocabulary::from(all)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= RESERVED.len()
    }

    pub fn index_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, index: usize) -> &str {
        self.tokens.get(index).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.index_of(t)).collect()
    }

    /// Maps indices back to tokens, stopping at the end marker and skipping
    /// padding and the start marker.
    pub fn decode(&self, indices: &[usize]) -> Vec<String> {
        indices
            .iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i).to_string())
            .collect()
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .skip(RESERVED.len())
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Builds one vocabulary over all datasets; tokens are ordered by count
/// (descending) then lexicographically.
pub fn build_vocab(datasets: &[&LabeledDataset], min_count: usize) -> Vocabulary {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for ds in datasets {
        for item in &ds.items {
            for sentence in &item.annotation.sentences {
                for tok in sentence {
                    *counts.entry(tok.as_str()).or_default() += 1;
                }
            }
        }
    }
    let mut entries: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_count.max(1))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocabulary::from_tokens(entries.into_iter().map(|(t, _)| t.to_string()))
}

/// Linearly interpolates `raw` (T x d) at `t` evenly spaced positions over
/// `[0, T-1]`. Returns the resampled matrix and the fractional source
/// positions of its rows.
pub fn resample_features(raw: ArrayView2<f64>, t: usize) -> Result<(Array2<f64>, Vec<f64>)> {
    let rows = raw.nrows();
    if rows == 0 {
        return Err(Error::Validation("cannot resample a zero-length video".into()));
    }
    if t == 0 {
        return Err(Error::Validation("target length must be at least 1".into()));
    }
    if rows == t {
        return Ok((raw.to_owned(), (0..t).map(|i| i as f64).collect()));
    }
    let mut out = Array2::zeros((t, raw.ncols()));
    let mut positions = Vec::with_capacity(t);
    for k in 0..t {
        let pos = if t == 1 {
            0.0
        } else {
            k as f64 * (rows - 1) as f64 / (t - 1) as f64
        };
        let lo = (pos.floor() as usize).min(rows - 1);
        let frac = pos - lo as f64;
        let mut dst = out.row_mut(k);
        if frac == 0.0 || lo + 1 >= rows {
            dst.assign(&raw.row(lo));
        } else {
            let a = raw.row(lo);
            let b = raw.row(lo + 1);
            for ((d, &x), &y) in dst.iter_mut().zip(a).zip(b) {
                *d = (1.0 - frac) * x + frac * y;
            }
        }
        positions.push(pos);
    }
    Ok((out, positions))
}

/// Writes a whole dataset (annotations excluded) under `dir` as
/// `<video_id>.bin/.json` feature files plus `<video_id>.views.json`.
pub fn write_dataset_files(dir: &Path, ds: &LabeledDataset, fps: f64, mode: Option<&str>) -> Result<()> {
    for item in &ds.items {
        if let Some(f) = &item.features {
            let bin = dir.join(format!("{}.bin", item.video_id));
            write_features(
                &bin,
                f.frames.view(),
                &FeatureSidecar {
                    video_id: item.video_id.clone(),
                    t: f.len(),
                    d: f.width(),
                    fps,
                    mode: mode.map(str::to_string),
                },
            )?;
        }
        if let Some(v) = &item.views {
            write_view_track(&dir.join(format!("{}.views.json", item.video_id)), v)?;
        }
    }
    Ok(())
}

/// Attaches `<video_id>.bin` features and `<video_id>.views.json` tracks
/// found in `dir`, keeping raw length.
pub fn attach_dataset_files(dir: &Path, ds: &mut LabeledDataset) -> Result<()> {
    for item in &mut ds.items {
        let bin = dir.join(format!("{}.bin", item.video_id));
        let (frames, sidecar) = read_features(&bin)?;
        let timestamps = (0..frames.nrows()).map(|i| i as f64 / sidecar.fps).collect();
        item.features = Some(VideoFeatures { frames, timestamps });
        let views_path = dir.join(format!("{}.views.json", item.video_id));
        if views_path.exists() {
            item.views = Some(read_view_track(&views_path)?);
        }
    }
    ds.validate()
}
