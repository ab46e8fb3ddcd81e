//! Command-line surface of the pipeline. Every command writes its outputs
//! into `--out <dir>` together with a `manifest.json` from which the run
//! can be replayed.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod plot;

use std::ffi::OsString;
use std::path::PathBuf;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use viewdvc::{Error, Result};

use config::CliConfig;
use manifest::{hash_inputs, hash_outputs, RunManifest};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "viewdvc", version, about = "View-invariant dense video captioning pipeline")]
pub struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for training and synthesis.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Upper bound on worker threads for commands that parallelize.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct OutArg {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct DataArgs {
    /// Annotation file covering both domains.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Directory of source feature files and view tracks.
    #[arg(long)]
    pub features: PathBuf,
    /// Directory of target feature files; defaults to --features.
    #[arg(long)]
    pub target_features: Option<PathBuf>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lambda_adv: Option<f64>,
    #[arg(long)]
    pub lambda_src: Option<f64>,
    #[arg(long)]
    pub lr_model: Option<f64>,
    #[arg(long)]
    pub lr_classifier: Option<f64>,
    /// Frames every video is resampled to.
    #[arg(long)]
    pub t: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic two-domain corpus.
    GenSynth {
        #[command(flatten)]
        out: OutArg,
        #[arg(long)]
        source_videos: Option<usize>,
        #[arg(long)]
        target_videos: Option<usize>,
        #[arg(long)]
        view_gap: Option<f64>,
        #[arg(long)]
        motion_noise: Option<f64>,
        /// Target feature representation (V, VC or VC+HO).
        #[arg(long)]
        representation: Option<String>,
    },
    /// Track faces and label every frame exo or ego-like.
    LabelViews {
        #[command(flatten)]
        out: OutArg,
        /// JSON-lines detection file.
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        num_frames: usize,
        #[arg(long)]
        smooth_window: Option<usize>,
    },
    /// Track hands and compute per-frame crop boxes.
    TrackCrop {
        #[command(flatten)]
        out: OutArg,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        num_frames: usize,
        #[arg(long)]
        frame_width: f64,
        #[arg(long)]
        frame_height: f64,
        #[arg(long)]
        margin: Option<f64>,
    },
    /// Replace interaction masks by their best-overlapping proposals.
    RefineMasks {
        #[command(flatten)]
        out: OutArg,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        min_overlap_ratio: Option<f64>,
    },
    /// Encode a directory of frames into a feature file.
    ExtractFeatures {
        #[command(flatten)]
        out: OutArg,
        /// Directory of PNG frames, read in file-name order.
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        video_id: String,
        /// V, VC or VC+HO.
        #[arg(long, default_value = "V")]
        mode: String,
        /// Crop boxes from track-crop.
        #[arg(long)]
        crops: Option<PathBuf>,
        /// Mask file, usually from refine-masks.
        #[arg(long)]
        masks: Option<PathBuf>,
        /// View track copied next to the features.
        #[arg(long)]
        views: Option<PathBuf>,
        #[arg(long)]
        fps: Option<f64>,
    },
    /// Derive step segments from marker detections.
    SegmentMarkers {
        #[command(flatten)]
        out: OutArg,
        #[arg(long)]
        markers: PathBuf,
        #[arg(long)]
        fps: f64,
        #[arg(long)]
        num_frames: Option<usize>,
        #[arg(long)]
        debounce: Option<usize>,
    },
    /// Pre-train on the source domain (PT or VI-PT).
    Pretrain {
        #[command(flatten)]
        out: OutArg,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "PT")]
        stage: String,
        #[command(flatten)]
        train: TrainOverrides,
    },
    /// Fine-tune a pre-trained checkpoint on the target domain (FT or VI-FT).
    Finetune {
        #[command(flatten)]
        out: OutArg,
        #[command(flatten)]
        data: DataArgs,
        /// Pre-training checkpoint directory.
        #[arg(long)]
        init: PathBuf,
        #[arg(long, default_value = "FT")]
        stage: String,
        #[command(flatten)]
        train: TrainOverrides,
    },
    /// Score predictions, or predict with a checkpoint and score.
    Evaluate {
        #[command(flatten)]
        out: OutArg,
        /// Annotation file with the references.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Prediction file to score.
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        pred: Option<PathBuf>,
        #[arg(long, requires = "features")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        /// source or target; which videos to predict with --checkpoint.
        #[arg(long, default_value = "target")]
        domain: String,
        /// all, train or eval.
        #[arg(long, default_value = "eval")]
        split: String,
    },
    /// Caption ground-truth segments with the best-overlapping queries.
    EvalGtProposals {
        #[command(flatten)]
        out: OutArg,
        /// Scripted query segments and ground truth, scored without a model.
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        queries: Option<PathBuf>,
        #[arg(long, requires_all = ["features", "reference"])]
        checkpoint: Option<PathBuf>,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, default_value = "target")]
        domain: String,
        #[arg(long, default_value = "eval")]
        split: String,
    },
    /// Write converter outputs of every frame with view labels.
    DumpEmbeddings {
        #[command(flatten)]
        out: OutArg,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// source, target or both.
        #[arg(long, default_value = "both")]
        domain: String,
    },
    /// Render a caption timeline or an embedding projection as SVG.
    PlotTimeline {
        #[command(flatten)]
        out: OutArg,
        #[arg(long, requires_all = ["reference", "video"], required_unless_present = "embeddings")]
        pred: Option<PathBuf>,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long)]
        video: Option<String>,
        /// Embedding file from dump-embeddings.
        #[arg(long, conflicts_with = "pred")]
        embeddings: Option<PathBuf>,
        #[arg(long, default_value_t = 3000)]
        max_points: usize,
    },
    /// Run VI-PT for several lambda_adv values and select by sum_METEOR.
    SweepAdv {
        #[command(flatten)]
        out: OutArg,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.1,1")]
        values: Vec<f64>,
        #[command(flatten)]
        train: TrainOverrides,
    },
    /// Re-run the command recorded in a manifest and compare outputs.
    Replay {
        manifest: PathBuf,
        /// Where the replayed outputs go; defaults to `<out>.replay`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenSynth { .. } => "gen-synth",
            Command::LabelViews { .. } => "label-views",
            Command::TrackCrop { .. } => "track-crop",
            Command::RefineMasks { .. } => "refine-masks",
            Command::ExtractFeatures { .. } => "extract-features",
            Command::SegmentMarkers { .. } => "segment-markers",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Evaluate { .. } => "evaluate",
            Command::EvalGtProposals { .. } => "eval-gt-proposals",
            Command::DumpEmbeddings { .. } => "dump-embeddings",
            Command::PlotTimeline { .. } => "plot-timeline",
            Command::SweepAdv { .. } => "sweep-adv",
            Command::Replay { .. } => "replay",
        }
    }

    fn out(&self) -> Option<&PathBuf> {
        match self {
            Command::GenSynth { out, .. }
            | Command::LabelViews { out, .. }
            | Command::TrackCrop { out, .. }
            | Command::RefineMasks { out, .. }
            | Command::ExtractFeatures { out, .. }
            | Command::SegmentMarkers { out, .. }
            | Command::Pretrain { out, .. }
            | Command::Finetune { out, .. }
            | Command::Evaluate { out, .. }
            | Command::EvalGtProposals { out, .. }
            | Command::DumpEmbeddings { out, .. }
            | Command::PlotTimeline { out, .. }
            | Command::SweepAdv { out, .. } => Some(&out.out),
            Command::Replay { .. } => None,
        }
    }
}

/// What a command reports back for its manifest.
#[derive(Debug, Default)]
pub struct Outcome {
    pub inputs: Vec<PathBuf>,
    pub seed: Option<u64>,
}

/// Parses `args` (without the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<String> = args
        .into_iter()
        .map(|a| a.into().to_string_lossy().into_owned())
        .collect();
    let cli = match Cli::try_parse_from(std::iter::once("viewdvc".to_string()).chain(argv.iter().cloned())) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli, &argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn execute(cli: Cli, argv: &[String]) -> Result<()> {
    if cli.workers == 0 {
        return Err(Error::Validation("--workers must be >= 1".into()));
    }
    if let Command::Replay { manifest, out } = &cli.command {
        return commands::replay(manifest, out.as_deref());
    }
    let mut cfg = CliConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    let out = cli.command.out().expect("non-replay commands have --out").clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let started = Instant::now();
    let started_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let mut outcome = commands::dispatch(&cli.command, &mut cfg, cli.workers)?;
    outcome.inputs.extend(cli.config.iter().cloned());
    let config = serde_json::to_value(&cfg).map_err(|e| Error::Runtime(e.to_string()))?;
    let cwd = std::env::current_dir().map_err(|e| Error::Runtime(format!("current directory: {e}")))?;
    RunManifest {
        command: cli.command.name().to_string(),
        argv: argv.to_vec(),
        cwd,
        config,
        seed: outcome.seed,
        inputs: hash_inputs(&outcome.inputs)?,
        outputs: hash_outputs(&out)?,
        out,
        started_unix,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    }
    .write()
}
