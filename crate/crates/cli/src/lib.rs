//! Command-line front end: dataset generation, training, inference,
//! evaluation and benchmarking.

pub mod bench;
pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use octflow::dataset::{build_dataset, generate_bases, plan_dataset, DatasetManifest, Split};
use octflow::estimator::{run_pipeline, FramePair, PipelineModel, StageKind};
use octflow::field::{read_depth_map, read_volume, sniff_magic, write_flow, FileKind};
use octflow::trainer::{evaluate_dataset, MetricsReport, PrecomputedFlows, TrainData, Trainer};
use octflow::{DepthMapF32, DepthMapF64, Error, Result};

pub use bench::{bench, BenchReport};
pub use config::RunConfig;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::State(_) => EXIT_CONFIG,
        Error::Io { .. } | Error::Format(_) => EXIT_IO,
        Error::Domain(_) | Error::Graph { .. } | Error::Training { .. } | Error::Evaluation(_) => EXIT_NUMERICAL,
    }
}

#[derive(Debug, Parser)]
#[command(name = "octflow", version, about = "2.5D scene flow between OCT volumes")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a semi-synthetic dataset.
    Gen(GenArgs),
    /// Train a convolutional pipeline stage by stage.
    Train(TrainArgs),
    /// Estimate flow between two depth maps or volumes.
    Infer(InferArgs),
    /// Evaluate a model or stored predictions on a dataset split.
    Eval(EvalArgs),
    /// Time the pipeline on a generated pair.
    Bench(BenchArgs),
    /// Print the effective configuration as dotted keys.
    PrintConfig,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Existing output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub bases: Option<usize>,
    #[arg(long)]
    pub pairs_per_base: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub translation_sigma: Option<f64>,
    #[arg(long)]
    pub rotation_sigma: Option<f64>,
    #[arg(long)]
    pub depth_sigma: Option<f64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Write the manifest only, without synthesizing pairs.
    #[arg(long)]
    pub manifest_only: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from the training state in `out`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Saved model directory; the configured model is used otherwise.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub first: PathBuf,
    #[arg(long)]
    pub second: PathBuf,
    /// Output flow file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, conflicts_with = "predictions")]
    pub model: Option<PathBuf>,
    /// Directory of predicted flows named like the ground truth.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Directory receiving metrics.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub budget_ms: Option<f64>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub levels: Option<usize>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Runs one parsed command line and returns its printable summary.
pub fn run(cli: Cli) -> Result<String> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Gen(a) => {
            set(&mut cfg.gen.bases, a.bases);
            set(&mut cfg.gen.width, a.width);
            set(&mut cfg.gen.height, a.height);
            set(&mut cfg.augment.pairs_per_base, a.pairs_per_base);
            set(&mut cfg.augment.seed, a.seed);
            set(&mut cfg.augment.translation_sigma_vox, a.translation_sigma);
            set(&mut cfg.augment.rotation_sigma_rad, a.rotation_sigma);
            set(&mut cfg.augment.depth_translation_sigma_vox, a.depth_sigma);
            set(&mut cfg.augment.noise_sigma, a.noise_sigma);
            cfg.validate()?;
            gen(&cfg, &a.out, a.manifest_only)
        }
        Command::Train(a) => {
            set(&mut cfg.train.weights.alpha, a.alpha);
            set(&mut cfg.train.epochs, a.epochs);
            set(&mut cfg.train.seed, a.seed);
            cfg.validate()?;
            train(&cfg, &a.data, &a.out, a.resume)
        }
        Command::Infer(a) => {
            cfg.validate()?;
            infer(&cfg, &a)
        }
        Command::Eval(a) => {
            cfg.validate()?;
            eval(&cfg, &a)
        }
        Command::Bench(a) => {
            set(&mut cfg.bench.runs, a.runs);
            set(&mut cfg.bench.budget_ms, a.budget_ms);
            set(&mut cfg.bench.width, a.width);
            set(&mut cfg.bench.height, a.height);
            set(&mut cfg.model.levels, a.levels);
            cfg.validate()?;
            let model = load_model(&cfg, a.model.as_deref())?;
            Ok(bench(&model, &cfg.bench)?.to_string())
        }
        Command::PrintConfig => {
            cfg.validate()?;
            cfg.to_dotted()
        }
    }
}

fn split_summary(m: &DatasetManifest) -> String {
    format!(
        "{} pairs: train {}, val {}, test {}",
        m.len(),
        m.count(Split::Train),
        m.count(Split::Val),
        m.count(Split::Test)
    )
}

fn gen(cfg: &RunConfig, out: &Path, manifest_only: bool) -> Result<String> {
    if !out.is_dir() {
        return Err(io(out, std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist")));
    }
    let g = &cfg.gen;
    let manifest = if manifest_only {
        let m = plan_dataset(g.bases, g.width, g.height, &cfg.augment)?;
        m.write(out)?;
        m
    } else {
        let bases: Vec<DepthMapF64> = generate_bases(g.bases, g.width, g.height, g.base_seed, &g.base)?;
        build_dataset(&bases, &cfg.augment, out)?
    };
    cfg.write_into(out)?;
    Ok(split_summary(&manifest))
}

const STATE_DIR: &str = "state";
const MODEL_DIR: &str = "model";
const HISTORY_FILE: &str = "history.csv";

fn train(cfg: &RunConfig, data: &Path, out: &Path, resume: bool) -> Result<String> {
    if cfg.model.kind != StageKind::Convolutional {
        return Err(Error::Config("training needs model.kind = \"convolutional\"".into()));
    }
    let manifest = DatasetManifest::read(data)?;
    let pairs = TrainData::<f32>::load(data, &manifest)?;
    fs::create_dir_all(out).map_err(|e| io(out, e))?;
    let state = out.join(STATE_DIR);
    let mut trainer = if resume {
        Trainer::load(&state)?
    } else {
        Trainer::new(cfg.model.build()?, cfg.train)?
    };
    cfg.write_into(out)?;
    while trainer.run_epoch(&pairs)? {
        if let Some(r) = trainer.history.last() {
            info!(
                "{:?} stage {} epoch {}: train {:.4}, val {:.4}, val EPE {:.3}",
                r.network, r.stage, r.epoch, r.train_loss, r.val_loss, r.val_epe
            );
        }
        trainer.save(&state)?;
    }
    trainer.save(&state)?;
    trainer.model.save(out.join(MODEL_DIR))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &trainer.history {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    let path = out.join(HISTORY_FILE);
    fs::write(&path, bytes).map_err(|e| io(&path, e))?;
    let mode = if cfg.train.weights.alpha == 0.0 { "unsupervised" } else { "semi-supervised" };
    Ok(format!(
        "trained {} stages ({mode}) over {} epochs; model in {}",
        2 * trainer.model.levels(),
        trainer.history.len(),
        out.join(MODEL_DIR).display()
    ))
}

fn load_model(cfg: &RunConfig, dir: Option<&Path>) -> Result<PipelineModel<f32>> {
    match dir {
        Some(d) => PipelineModel::load(d),
        None => cfg.model.build(),
    }
}

enum Frame {
    Depth(DepthMapF32),
    Volume(octflow::VolumeF32),
}

fn read_frame(path: &Path) -> Result<Frame> {
    let bytes = fs::read(path).map_err(|e| io(path, e))?;
    match sniff_magic(&bytes) {
        Some(FileKind::DepthMap) => Ok(Frame::Depth(read_depth_map(path)?)),
        Some(FileKind::Volume) => Ok(Frame::Volume(read_volume(path)?)),
        _ => Err(Error::Format(format!("{} is neither a depth map nor a volume", path.display()))),
    }
}

fn infer(cfg: &RunConfig, a: &InferArgs) -> Result<String> {
    let model = load_model(cfg, a.model.as_deref())?;
    let out = match (read_frame(&a.first)?, read_frame(&a.second)?) {
        (Frame::Depth(first), Frame::Depth(second)) => run_pipeline(
            &model,
            FramePair::DepthMaps {
                first: &first,
                second: &second,
            },
        )?,
        (Frame::Volume(first), Frame::Volume(second)) => run_pipeline(
            &model,
            FramePair::Volumes {
                first: &first,
                second: &second,
                min_intensity: cfg.infer.min_intensity as f32,
            },
        )?,
        _ => return Err(Error::Format("inputs must both be depth maps or both volumes".into())),
    };
    write_flow(&a.out, &out.flow)?;
    Ok(format!(
        "wrote {} ({}x{}, mean magnitude {:.4} voxel)",
        a.out.display(),
        out.flow.width(),
        out.flow.height(),
        out.flow.mean_magnitude()
    ))
}

fn eval(cfg: &RunConfig, a: &EvalArgs) -> Result<String> {
    let manifest = DatasetManifest::read(&a.data)?;
    let report = match &a.predictions {
        Some(dir) => {
            let p = PrecomputedFlows { dir: dir.clone() };
            evaluate_dataset::<f32, _>(&p, &a.data, &manifest, a.split, &cfg.eval)?
        }
        None => {
            let model = load_model(cfg, a.model.as_deref())?;
            evaluate_dataset(&model, &a.data, &manifest, a.split, &cfg.eval)?
        }
    };
    fs::create_dir_all(&a.out).map_err(|e| io(&a.out, e))?;
    let path = a.out.join("metrics.csv");
    fs::write(&path, MetricsReport::to_csv(std::slice::from_ref(&report))?).map_err(|e| io(&path, e))?;
    cfg.write_into(&a.out)?;
    Ok(report.to_string())
}
