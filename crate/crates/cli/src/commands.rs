//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use viewdvc::captioner::{assign_gt_proposals, generate_with_gt_proposals, QueryOutputs};
use viewdvc::data::{
    annotation_records, attach_dataset_files, build_vocab, load_annotations, read_json, read_view_track,
    write_bytes, write_dataset_files, write_features, write_json, write_view_track, Domain, EventPrediction,
    FeatureSidecar, LabeledDataset, Representation, Split, TimeSegment, Vocabulary,
};
use viewdvc::features::{extract_video_features, load_frames, toy_encoder};
use viewdvc::metrics::{evaluate, read_predictions, tiou, write_predictions, MetricReport};
use viewdvc::preproc::{
    hand_crop_boxes, label_views, read_detections, read_markers, segment_by_markers, track_sort, BBox, DetKind,
    MaskFile, MaskSet,
};
use viewdvc::synthdata::{gap_probe, gen_synthetic_corpus};
use viewdvc::trainer::{
    centroid_spread, dump_embeddings, read_embeddings, references, run_stage, sweep_adv, Checkpoint, Init, Stage,
    StageResult, TrainConfig,
};
use viewdvc::{Error, Result};

use crate::config::CliConfig;
use crate::manifest::{hash_file, hash_outputs, replace_out, RunManifest};
use crate::{plot, Command, DataArgs, Outcome, TrainOverrides};

pub fn dispatch(cmd: &Command, cfg: &mut CliConfig, workers: usize) -> Result<Outcome> {
    match cmd {
        Command::GenSynth {
            out,
            source_videos,
            target_videos,
            view_gap,
            motion_noise,
            representation,
        } => {
            let s = &mut cfg.synth;
            set(&mut s.source_videos, source_videos);
            set(&mut s.target_videos, target_videos);
            set(&mut s.view_gap, view_gap);
            set(&mut s.motion_noise, motion_noise);
            if let Some(r) = representation {
                s.target_representation = r.parse()?;
            }
            gen_synth(cfg, &out.out)
        }
        Command::LabelViews {
            out,
            detections,
            num_frames,
            smooth_window,
        } => {
            set(&mut cfg.preproc.smooth_window, smooth_window);
            label_views_cmd(cfg, detections, *num_frames, &out.out)
        }
        Command::TrackCrop {
            out,
            detections,
            num_frames,
            frame_width,
            frame_height,
            margin,
        } => {
            set(&mut cfg.preproc.crop_margin, margin);
            track_crop(cfg, detections, *num_frames, (*frame_width, *frame_height), &out.out)
        }
        Command::RefineMasks {
            out,
            masks,
            min_overlap_ratio,
        } => {
            set(&mut cfg.preproc.min_overlap_ratio, min_overlap_ratio);
            refine_masks_cmd(cfg, masks, &out.out)
        }
        Command::ExtractFeatures {
            out,
            frames,
            video_id,
            mode,
            crops,
            masks,
            views,
            fps,
        } => {
            set(&mut cfg.features.fps, fps);
            let job = FeatureJob {
                frames,
                video_id,
                mode: mode.parse()?,
                crops: crops.as_deref(),
                masks: masks.as_deref(),
                views: views.as_deref(),
            };
            extract_features(cfg, &job, workers, &out.out)
        }
        Command::SegmentMarkers {
            out,
            markers,
            fps,
            num_frames,
            debounce,
        } => {
            set(&mut cfg.preproc.marker_debounce, debounce);
            segment_markers(cfg, markers, *fps, *num_frames, &out.out)
        }
        Command::Pretrain { out, data, stage, train } => {
            apply_train(cfg, train);
            pretrain(cfg, data, stage, &out.out)
        }
        Command::Finetune {
            out,
            data,
            init,
            stage,
            train,
        } => {
            apply_train(cfg, train);
            finetune(cfg, data, init, stage, &out.out)
        }
        Command::Evaluate {
            out,
            reference,
            pred,
            checkpoint,
            features,
            domain,
            split,
        } => {
            let split = parse_split(split)?;
            match (pred, checkpoint, features) {
                (Some(p), _, _) => evaluate_predictions(p, reference, split, &out.out),
                (None, Some(c), Some(f)) => {
                    evaluate_checkpoint(c, reference, f, parse_domain(domain)?, split, workers, &out.out)
                }
                _ => Err(Error::Validation("evaluate needs --pred, or --checkpoint with --features".into())),
            }
        }
        Command::EvalGtProposals {
            out,
            queries,
            checkpoint,
            reference,
            features,
            domain,
            split,
        } => match (queries, checkpoint, reference, features) {
            (Some(q), _, _, _) => gt_proposals_scripted(q, &out.out),
            (None, Some(c), Some(r), Some(f)) => {
                gt_proposals_checkpoint(c, r, f, parse_domain(domain)?, parse_split(split)?, &out.out)
            }
            _ => Err(Error::Validation(
                "eval-gt-proposals needs --queries, or --checkpoint with --ref and --features".into(),
            )),
        },
        Command::DumpEmbeddings {
            out,
            data,
            checkpoint,
            domain,
        } => dump(data, checkpoint, domain, &out.out),
        Command::PlotTimeline {
            out,
            pred,
            reference,
            video,
            embeddings,
            max_points,
        } => plot_cmd(pred, reference, video, embeddings, *max_points, &out.out),
        Command::SweepAdv {
            out,
            data,
            values,
            train,
        } => {
            apply_train(cfg, train);
            sweep(cfg, data, values, &out.out)
        }
        Command::Replay { .. } => unreachable!("replay is handled before dispatch"),
    }
}

fn set<T: Clone>(slot: &mut T, value: &Option<T>) {
    if let Some(v) = value {
        *slot = v.clone();
    }
}

fn apply_train(cfg: &mut CliConfig, o: &TrainOverrides) {
    set(&mut cfg.train.epochs, &o.epochs);
    set(&mut cfg.adv.lambda_adv, &o.lambda_adv);
    set(&mut cfg.adv.lambda_src, &o.lambda_src);
    set(&mut cfg.train.lr_model, &o.lr_model);
    set(&mut cfg.train.lr_classifier, &o.lr_classifier);
    set(&mut cfg.data.t, &o.t);
}

fn parse_domain(s: &str) -> Result<Domain> {
    match s {
        "source" => Ok(Domain::Source),
        "target" => Ok(Domain::Target),
        _ => Err(Error::Validation(format!("unknown domain {s:?} (expected source or target)"))),
    }
}

fn parse_split(s: &str) -> Result<Option<Split>> {
    match s {
        "all" => Ok(None),
        "train" => Ok(Some(Split::Train)),
        "eval" => Ok(Some(Split::Eval)),
        _ => Err(Error::Validation(format!("unknown split {s:?} (expected all, train or eval)"))),
    }
}

fn restrict(ds: LabeledDataset, split: Option<Split>) -> LabeledDataset {
    match split {
        Some(s) => ds.split(s),
        None => ds,
    }
}

fn load_domain(annotations: &Path, features: &Path, domain: Domain) -> Result<LabeledDataset> {
    let mut ds = load_annotations(annotations, domain)?;
    attach_dataset_files(features, &mut ds)?;
    Ok(ds)
}

/// Vocabulary over the training captions of both domains.
fn corpus_vocab(annotations: &Path, min_count: usize) -> Result<Vocabulary> {
    let src = load_annotations(annotations, Domain::Source)?.split(Split::Train);
    let tgt = load_annotations(annotations, Domain::Target)?.split(Split::Train);
    Ok(build_vocab(&[&src, &tgt], min_count))
}

/// Applies `f` to every item on up to `workers` threads, keeping order.
pub fn par_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| scope.spawn(move || c.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Error::Runtime("worker thread panicked".into()))??);
        }
        Ok(out)
    })
}

fn gen_synth(cfg: &CliConfig, out: &Path) -> Result<Outcome> {
    let synth = &cfg.synth;
    let (source, target) = gen_synthetic_corpus(synth)?;
    write_json(&out.join("annotations.json"), &annotation_records(&[&source, &target]))?;
    let features = out.join("features");
    write_dataset_files(&features, &source, 1.0, Some(Representation::V.name()))?;
    write_dataset_files(&features, &target, 1.0, Some(synth.target_representation.name()))?;
    let accuracy = gap_probe(&[&source, &target], synth.seed)?;
    write_json(&out.join("gap_probe.json"), &serde_json::json!({ "accuracy": accuracy }))?;
    println!(
        "{} source and {} target videos, view probe accuracy {accuracy:.3}",
        source.len(),
        target.len()
    );
    Ok(Outcome {
        inputs: vec![],
        seed: Some(synth.seed),
    })
}

fn label_views_cmd(cfg: &CliConfig, detections: &Path, num_frames: usize, out: &Path) -> Result<Outcome> {
    let faces: Vec<_> = read_detections(detections)?
        .into_iter()
        .filter(|d| d.kind == DetKind::Face)
        .collect();
    let tracks = track_sort(&faces, &cfg.preproc.sort);
    let views = label_views(&tracks, num_frames, cfg.preproc.smooth_window);
    write_json(&out.join("face_tracks.json"), &tracks)?;
    write_view_track(&out.join("views.json"), &views)?;
    println!("{} face tracks over {num_frames} frames", tracks.len());
    Ok(Outcome {
        inputs: vec![detections.to_path_buf()],
        seed: None,
    })
}

fn track_crop(cfg: &CliConfig, detections: &Path, num_frames: usize, size: (f64, f64), out: &Path) -> Result<Outcome> {
    if !(size.0 > 0.0 && size.1 > 0.0) {
        return Err(Error::Validation(format!("frame size must be positive, got {}x{}", size.0, size.1)));
    }
    let hands: Vec<_> = read_detections(detections)?
        .into_iter()
        .filter(|d| d.kind == DetKind::Hand)
        .collect();
    let tracks = track_sort(&hands, &cfg.preproc.sort);
    let crops = hand_crop_boxes(&tracks, num_frames, size, cfg.preproc.crop_margin);
    write_json(&out.join("hand_tracks.json"), &tracks)?;
    write_json(&out.join("crops.json"), &crops)?;
    println!("{} hand tracks, {} crop boxes", tracks.len(), crops.len());
    Ok(Outcome {
        inputs: vec![detections.to_path_buf()],
        seed: None,
    })
}

fn refine_masks_cmd(cfg: &CliConfig, masks: &Path, out: &Path) -> Result<Outcome> {
    let ratio = cfg.preproc.min_overlap_ratio;
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Validation(format!("min_overlap_ratio must be in [0, 1], got {ratio}")));
    }
    let file: MaskFile = read_json(masks)?;
    let refined = file
        .to_sets()?
        .iter()
        .map(|s| s.refined(ratio))
        .collect::<Result<Vec<MaskSet>>>()?;
    write_json(&out.join("masks.json"), &MaskFile::from_sets(file.width, file.height, &refined))?;
    println!("refined {} frames", refined.len());
    Ok(Outcome {
        inputs: vec![masks.to_path_buf()],
        seed: None,
    })
}

struct FeatureJob<'a> {
    frames: &'a Path,
    video_id: &'a str,
    mode: Representation,
    crops: Option<&'a Path>,
    masks: Option<&'a Path>,
    views: Option<&'a Path>,
}

fn extract_features(cfg: &CliConfig, job: &FeatureJob<'_>, workers: usize, out: &Path) -> Result<Outcome> {
    let fc = &cfg.features;
    if !(fc.fps > 0.0) {
        return Err(Error::Validation(format!("fps must be > 0, got {}", fc.fps)));
    }
    let mut inputs = vec![job.frames.to_path_buf()];
    let frames = load_frames(job.frames)?;
    if frames.is_empty() {
        return Err(Error::Validation(format!("{}: no PNG frames", job.frames.display())));
    }
    let crops: Option<Vec<BBox>> = job.crops.map(read_json).transpose()?;
    let masks: Option<Vec<MaskSet>> = match job.masks {
        Some(p) => Some(read_json::<MaskFile>(p)?.to_sets()?),
        None => None,
    };
    inputs.extend(job.crops.map(Path::to_path_buf));
    inputs.extend(job.masks.map(Path::to_path_buf));
    let encoder = toy_encoder(fc.encoder_seed, fc.width)?;
    let n = frames.len();
    let chunk = n.div_ceil(workers.max(1));
    let ranges: Vec<(usize, usize)> = (0..n).step_by(chunk).map(|s| (s, (s + chunk).min(n))).collect();
    let parts = par_map(&ranges, workers, |&(a, b)| {
        extract_video_features(
            &encoder,
            &frames[a..b],
            crops.as_ref().map(|c| &c[a.min(c.len())..b.min(c.len())]),
            masks.as_ref().map(|m| &m[a.min(m.len())..b.min(m.len())]),
            job.mode,
        )
    });
    // Length mismatches surface from the full-length check below rather
    // than per chunk.
    if crops.as_ref().is_some_and(|c| c.len() != n) || masks.as_ref().is_some_and(|m| m.len() != n) {
        return Err(Error::Validation(format!("crop/mask files must have one entry for each of the {n} frames")));
    }
    let parts = parts?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let matrix: Array2<f64> = concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    let bin = out.join(format!("{}.bin", job.video_id));
    write_features(
        &bin,
        matrix.view(),
        &FeatureSidecar {
            video_id: job.video_id.to_string(),
            t: n,
            d: matrix.ncols(),
            fps: fc.fps,
            mode: Some(job.mode.name().to_string()),
        },
    )?;
    if let Some(v) = job.views {
        let track = read_view_track(v)?;
        if track.len() != n {
            return Err(Error::Validation(format!("{}: {} labels for {n} frames", v.display(), track.len())));
        }
        write_view_track(&out.join(format!("{}.views.json", job.video_id)), &track)?;
        inputs.push(v.to_path_buf());
    }
    println!("{}: {n} frames x {} features ({})", job.video_id, matrix.ncols(), job.mode.name());
    Ok(Outcome { inputs, seed: None })
}

fn segment_markers(cfg: &CliConfig, markers: &Path, fps: f64, num_frames: Option<usize>, out: &Path) -> Result<Outcome> {
    let present = read_markers(markers, num_frames)?;
    let segments = segment_by_markers(&present, fps, cfg.preproc.marker_debounce)?;
    let pairs: Vec<[f64; 2]> = segments.iter().map(|s| [s.start, s.end]).collect();
    write_json(&out.join("segments.json"), &pairs)?;
    println!("{} steps", pairs.len());
    Ok(Outcome {
        inputs: vec![markers.to_path_buf()],
        seed: None,
    })
}

fn report_stage(r: &StageResult) {
    match r.best() {
        Some(e) => {
            println!("{} best epoch {} of {}", r.stage, r.best_epoch, r.epochs.len());
            if let Some(rep) = &e.report {
                println!("{}\n{}", MetricReport::SUMMARY_HEADER, rep.summary_row());
            }
        }
        None => println!("{}: no epochs run", r.stage),
    }
}

fn parse_stage(s: &str, finetune: bool) -> Result<Stage> {
    let stage: Stage = s.parse()?;
    if stage.is_finetune() != finetune {
        let want = if finetune { "FT or VI-FT" } else { "PT or VI-PT" };
        return Err(Error::Validation(format!("stage {stage} not allowed here (expected {want})")));
    }
    Ok(stage)
}

fn training_config(cfg: &CliConfig, stage: Stage) -> TrainConfig {
    let mut tc = cfg.training();
    tc.train.stage = stage;
    tc
}

fn pretrain(cfg: &mut CliConfig, data: &DataArgs, stage: &str, out: &Path) -> Result<Outcome> {
    let stage = parse_stage(stage, false)?;
    cfg.train.stage = stage;
    let tc = training_config(cfg, stage);
    let source = load_domain(&data.annotations, &data.features, Domain::Source)?;
    let vocab = corpus_vocab(&data.annotations, tc.data.min_word_count)?;
    let r = run_stage(&tc, &source, None, Init::Fresh(vocab), out)?;
    report_stage(&r);
    Ok(Outcome {
        inputs: vec![data.annotations.clone(), data.features.clone()],
        seed: Some(tc.train.seed),
    })
}

fn finetune(cfg: &mut CliConfig, data: &DataArgs, init: &Path, stage: &str, out: &Path) -> Result<Outcome> {
    let stage = parse_stage(stage, true)?;
    cfg.train.stage = stage;
    let tc = training_config(cfg, stage);
    let source = load_domain(&data.annotations, &data.features, Domain::Source)?;
    let target_dir = data.target_features.as_ref().unwrap_or(&data.features);
    let target = load_domain(&data.annotations, target_dir, Domain::Target)?;
    let r = run_stage(&tc, &source, Some(&target), Init::Checkpoint(init), out)?;
    report_stage(&r);
    let mut inputs = vec![data.annotations.clone(), data.features.clone(), init.to_path_buf()];
    if target_dir != &data.features {
        inputs.push(target_dir.clone());
    }
    Ok(Outcome {
        inputs,
        seed: Some(tc.train.seed),
    })
}

fn write_report(report: &MetricReport, out: &Path) -> Result<()> {
    report.write(&out.join("report.json"))?;
    println!("{}\n{}", MetricReport::SUMMARY_HEADER, report.summary_row());
    Ok(())
}

fn evaluate_predictions(pred: &Path, reference: &Path, split: Option<Split>, out: &Path) -> Result<Outcome> {
    let preds = read_predictions(pred)?;
    let mut refs = BTreeMap::new();
    for domain in [Domain::Source, Domain::Target] {
        refs.extend(references(&restrict(load_annotations(reference, domain)?, split)));
    }
    if let Some(v) = preds.keys().find(|v| !refs.contains_key(*v)) {
        return Err(Error::Validation(format!(
            "{}: video {v:?} has no reference in {} for the selected split",
            pred.display(),
            reference.display()
        )));
    }
    write_report(&evaluate(&preds, &refs), out)?;
    Ok(Outcome {
        inputs: vec![pred.to_path_buf(), reference.to_path_buf()],
        seed: None,
    })
}

fn evaluate_checkpoint(
    checkpoint: &Path,
    reference: &Path,
    features: &Path,
    domain: Domain,
    split: Option<Split>,
    workers: usize,
    out: &Path,
) -> Result<Outcome> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let ds = restrict(load_domain(reference, features, domain)?, split).resampled(ckpt.config.data.t)?;
    let preds = par_map(&ds.items, workers, |item| {
        let p = ckpt.model.predict(&item.features()?.frames, item.annotation.duration, &ckpt.vocab)?;
        Ok((item.video_id.clone(), p))
    })?;
    let preds: BTreeMap<String, Vec<EventPrediction>> = preds.into_iter().collect();
    write_predictions(&out.join("predictions.json"), &preds)?;
    write_report(&evaluate(&preds, &references(&ds)), out)?;
    Ok(Outcome {
        inputs: vec![checkpoint.to_path_buf(), reference.to_path_buf(), features.to_path_buf()],
        seed: None,
    })
}

/// Scripted query segments (normalized center and length) with ground
/// truth, for checking the assignment rule without a model.
#[derive(Debug, Deserialize)]
struct ScriptedQueries {
    duration: f64,
    queries: Vec<[f64; 2]>,
    gt_segments: Vec<[f64; 2]>,
}

#[derive(Debug, Serialize)]
struct Assignments {
    assignment: Vec<usize>,
    tiou: Vec<f64>,
}

fn gt_proposals_scripted(path: &Path, out: &Path) -> Result<Outcome> {
    let q: ScriptedQueries = read_json(path)?;
    if q.queries.is_empty() {
        return Err(Error::Validation(format!("{}: no queries", path.display())));
    }
    let gts: Vec<TimeSegment> = q.gt_segments.iter().map(|s| TimeSegment::new(s[0], s[1])).collect();
    for g in &gts {
        g.validate(q.duration)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    }
    let n = q.queries.len();
    let outputs = QueryOutputs {
        segments: Array2::from_shape_fn((n, 2), |(i, j)| q.queries[i][j]),
        fg_logits: vec![0.0; n],
        caption_logits: Array3::zeros((n, 1, 1)),
        count_logits: vec![0.0; n],
    };
    let assignment = assign_gt_proposals(&outputs, q.duration, &gts);
    let tiou = assignment
        .iter()
        .zip(&gts)
        .map(|(&k, g)| {
            let p = viewdvc::captioner::denormalize(q.queries[k][0], q.queries[k][1], q.duration);
            tiou(&p, g)
        })
        .collect();
    let result = Assignments { assignment, tiou };
    write_json(&out.join("assignments.json"), &result)?;
    for (i, (k, t)) in result.assignment.iter().zip(&result.tiou).enumerate() {
        println!("segment {i} -> query {k} (tIoU {t:.4})");
    }
    Ok(Outcome {
        inputs: vec![path.to_path_buf()],
        seed: None,
    })
}

fn gt_proposals_checkpoint(
    checkpoint: &Path,
    reference: &Path,
    features: &Path,
    domain: Domain,
    split: Option<Split>,
    out: &Path,
) -> Result<Outcome> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let ds = restrict(load_domain(reference, features, domain)?, split).resampled(ckpt.config.data.t)?;
    let mut preds = BTreeMap::new();
    for item in &ds.items {
        let a = &item.annotation;
        let captions =
            generate_with_gt_proposals(&ckpt.model, &item.features()?.frames, &a.segments, a.duration, &ckpt.vocab)?;
        let events = a
            .segments
            .iter()
            .zip(captions)
            .map(|(s, tokens)| EventPrediction {
                segment: *s,
                confidence: 1.0,
                tokens,
            })
            .collect();
        preds.insert(item.video_id.clone(), events);
    }
    write_predictions(&out.join("predictions.json"), &preds)?;
    write_report(&evaluate(&preds, &references(&ds)), out)?;
    Ok(Outcome {
        inputs: vec![checkpoint.to_path_buf(), reference.to_path_buf(), features.to_path_buf()],
        seed: None,
    })
}

fn dump(data: &DataArgs, checkpoint: &Path, domain: &str, out: &Path) -> Result<Outcome> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let domains = match domain {
        "both" => vec![Domain::Source, Domain::Target],
        d => vec![parse_domain(d)?],
    };
    let target_dir = data.target_features.as_ref().unwrap_or(&data.features);
    let mut datasets = Vec::new();
    for d in domains {
        let dir = if d == Domain::Source { &data.features } else { target_dir };
        datasets.push(load_domain(&data.annotations, dir, d)?);
    }
    let refs: Vec<&LabeledDataset> = datasets.iter().collect();
    let path = out.join("embeddings.tsv");
    let rows = dump_embeddings(&ckpt.model, &refs, ckpt.config.data.t, &path)?;
    let spread = centroid_spread(&read_embeddings(&path)?);
    write_json(
        &out.join("summary.json"),
        &serde_json::json!({ "rows": rows, "centroid_spread": spread }),
    )?;
    match spread {
        Some(s) => println!("{rows} rows, centroid spread {s:.4}"),
        None => println!("{rows} rows"),
    }
    let mut inputs = vec![data.annotations.clone(), data.features.clone(), checkpoint.to_path_buf()];
    if target_dir != &data.features {
        inputs.push(target_dir.clone());
    }
    Ok(Outcome { inputs, seed: None })
}

fn plot_cmd(
    pred: &Option<PathBuf>,
    reference: &Option<PathBuf>,
    video: &Option<String>,
    embeddings: &Option<PathBuf>,
    max_points: usize,
    out: &Path,
) -> Result<Outcome> {
    if let Some(e) = embeddings {
        let svg = plot::projection_svg(&read_embeddings(e)?, max_points)?;
        write_bytes(&out.join("projection.svg"), svg.as_bytes())?;
        return Ok(Outcome {
            inputs: vec![e.clone()],
            seed: None,
        });
    }
    let (Some(pred), Some(reference), Some(video)) = (pred, reference, video) else {
        return Err(Error::Validation("plot-timeline needs --embeddings, or --pred with --ref and --video".into()));
    };
    let preds = read_predictions(pred)?;
    let mut refs = BTreeMap::new();
    for domain in [Domain::Source, Domain::Target] {
        refs.extend(references(&load_annotations(reference, domain)?));
    }
    let annotation = refs
        .get(video)
        .ok_or_else(|| Error::Validation(format!("{}: no video {video:?}", reference.display())))?;
    let events = preds.get(video).map_or(&[][..], Vec::as_slice);
    let svg = plot::timeline_svg(video, annotation, events);
    write_bytes(&out.join("timeline.svg"), svg.as_bytes())?;
    Ok(Outcome {
        inputs: vec![pred.clone(), reference.clone()],
        seed: None,
    })
}

fn sweep(cfg: &mut CliConfig, data: &DataArgs, values: &[f64], out: &Path) -> Result<Outcome> {
    if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Validation(format!("lambda_adv values must be finite and >= 0, got {v}")));
    }
    cfg.train.stage = Stage::ViPt;
    let tc = training_config(cfg, Stage::ViPt);
    let source = load_domain(&data.annotations, &data.features, Domain::Source)?;
    let vocab = corpus_vocab(&data.annotations, tc.data.min_word_count)?;
    let mut result = sweep_adv(&tc, &source, &vocab, values, out)?;
    for row in &mut result.rows {
        if let Ok(rel) = row.checkpoint.strip_prefix(out) {
            row.checkpoint = rel.to_path_buf();
        }
    }
    write_json(&out.join("sweep.json"), &result)?;
    let table = result.table();
    write_bytes(&out.join("sweep.tsv"), table.as_bytes())?;
    print!("{table}");
    Ok(Outcome {
        inputs: vec![data.annotations.clone(), data.features.clone()],
        seed: Some(tc.train.seed),
    })
}

/// Re-runs a recorded command into a fresh directory after checking that
/// its inputs are unchanged, then compares every output file by hash.
pub fn replay(manifest_path: &Path, out: Option<&Path>) -> Result<()> {
    let m = RunManifest::load(manifest_path)?;
    let absolute = |p: &Path| -> Result<PathBuf> {
        std::path::absolute(p).map_err(|e| Error::Runtime(format!("{}: {e}", p.display())))
    };
    let new_out = match out {
        Some(o) => absolute(o)?,
        None => {
            let mut s = m.cwd.join(&m.out).into_os_string();
            s.push(".replay");
            PathBuf::from(s)
        }
    };
    if new_out.exists() && std::fs::read_dir(&new_out).map_err(|e| Error::io(&new_out, e))?.next().is_some() {
        return Err(Error::Validation(format!("{}: replay directory is not empty", new_out.display())));
    }
    std::env::set_current_dir(&m.cwd).map_err(|e| Error::io(&m.cwd, e))?;
    for (path, want) in &m.inputs {
        if hash_file(path)? != *want {
            return Err(Error::Validation(format!("{}: input changed since the recorded run", path.display())));
        }
    }
    let argv = replace_out(&m.argv, &new_out)?;
    let code = crate::run(argv);
    if code != crate::EXIT_OK {
        return Err(Error::Runtime(format!("replayed {} exited with code {code}", m.command)));
    }
    let got = hash_outputs(&new_out)?;
    let mut differing: Vec<String> = Vec::new();
    for (path, want) in &m.outputs {
        match got.get(path) {
            Some(h) if h == want => {}
            Some(_) => differing.push(format!("{} differs", path.display())),
            None => differing.push(format!("{} missing", path.display())),
        }
    }
    differing.extend(
        got.keys()
            .filter(|p| !m.outputs.contains_key(*p))
            .map(|p| format!("{} unexpected", p.display())),
    );
    if !differing.is_empty() {
        return Err(Error::Runtime(format!(
            "replay of {} is not identical: {}",
            m.command,
            differing.join(", ")
        )));
    }
    println!("replay of {} identical: {} output files", m.command, got.len());
    Ok(())
}
