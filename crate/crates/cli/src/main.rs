//! `tryon` command-line entry point.
//!
//! Layout: `config` owns the layered run configuration; this file owns
//! argument parsing, subcommand dispatch, and the exit-code policy. Exit 0
//! on success; 1 when any module reports a contract error (bad data, missing
//! prerequisite, unresolvable config); 2 on bad usage (unknown flags or
//! malformed flag values, reported by clap).

mod config;

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use tryon_core::crop::{precrop_dataset, CropError};
use tryon_core::dataset::{
    load_dataset_index, load_sample_with_palette, pairs_path, DatasetError, LoadOptions, PairMode,
    Split,
};
use tryon_core::fid::{frechet_distance, FidError};
use tryon_core::palette::{Palette, PaletteError};
use tryon_core::raster::RasterError;
use tryon_pipeline::chart::render_line_chart;
use tryon_pipeline::evaluation::{
    accumulate_dir_stats, build_fid_report, run_unpaired_inference, CheckpointSet, EvalError,
};
use tryon_pipeline::losses::GanMode;
use tryon_pipeline::training::{train_stage, Stage, TrainError};

use config::{parse_gan_mode, ConfigError, Overrides, RunConfig, DATA_ROOT_ENV};

#[derive(Debug, Parser)]
#[command(
    name = "tryon",
    version,
    about = "Virtual try-on pipeline: data preparation, staged training, inference, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Check that a dataset root has the expected layout and loadable samples
    ValidateData(ValidateDataArgs),
    /// Pre-crop the test split at one fixed scale into a new dataset root
    Precrop(PrecropArgs),
    /// Train one generator stage (earlier stages need checkpoints first)
    Train(TrainArgs),
    /// Run the frozen three-stage chain over the unpaired test list
    Infer(InferArgs),
    /// Distribution distance between two PNG directories
    Fid(FidArgs),
    /// Distance-vs-scale table and chart over several model output trees
    Report(ReportArgs),
}

/// Flags shared by every subcommand that resolves a run configuration.
#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML config file; flags override its values
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Dataset root (overrides TRYON_DATA_ROOT and data_io.root)
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self, mut ovr: Overrides) -> Result<RunConfig, CliError> {
        ovr.data_root = self.data.clone();
        let env_root = std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from);
        let cfg = RunConfig::resolve(self.config.as_deref(), env_root, &ovr)?;
        cfg.log();
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct ValidateDataArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug, Args)]
struct PrecropArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output dataset root
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Fixed area fraction in (0, 1]; 0.7 means the range [0.7, 0.7]
    #[arg(long)]
    scale: f64,
    /// Seed for the per-image window draws
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overwrite an existing output root
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Stage to train: seg, deform, or synth
    #[arg(long)]
    stage: Stage,
    /// Directory receiving the checkpoint and the loss CSV
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Override train.epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Override train.batch_size
    #[arg(long)]
    batch_size: Option<usize>,
    /// Override train.lr
    #[arg(long)]
    lr: Option<f64>,
    /// Override train.seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override train.gan_mode (hinge or bce)
    #[arg(long, value_parser = parse_gan_mode)]
    gan_mode: Option<GanMode>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Directory holding seg.ckpt, deform.ckpt, and synth.ckpt
    #[arg(long, value_name = "DIR")]
    ckpts: PathBuf,
    /// Directory receiving one PNG per test pair plus manifest.json
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FidArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Directory of reference PNGs
    #[arg(long, value_name = "DIR")]
    real: PathBuf,
    /// Directory of generated PNGs
    #[arg(long, value_name = "DIR")]
    fake: PathBuf,
}

/// `--real SCALE=DIR`: one reference directory per evaluation scale.
#[derive(Debug, Clone)]
struct RealArg {
    scale: f64,
    dir: PathBuf,
}

impl FromStr for RealArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (scale, dir) = s
            .split_once('=')
            .ok_or_else(|| format!("expected SCALE=DIR, got {s:?}"))?;
        let scale: f64 = scale
            .parse()
            .map_err(|_| format!("scale {scale:?} is not a number in {s:?}"))?;
        Ok(Self {
            scale,
            dir: PathBuf::from(dir),
        })
    }
}

/// `--fake MODEL=SCALE=DIR`: one generated directory per model and scale.
#[derive(Debug, Clone)]
struct FakeArg {
    model: String,
    scale: f64,
    dir: PathBuf,
}

impl FromStr for FakeArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.splitn(3, '=').collect();
        let [model, scale, dir] = parts[..] else {
            return Err(format!("expected MODEL=SCALE=DIR, got {s:?}"));
        };
        let scale: f64 = scale
            .parse()
            .map_err(|_| format!("scale {scale:?} is not a number in {s:?}"))?;
        Ok(Self {
            model: model.to_string(),
            scale,
            dir: PathBuf::from(dir),
        })
    }
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Reference directory per scale, as SCALE=DIR (repeat per scale)
    #[arg(long = "real", value_name = "SCALE=DIR", required = true)]
    real: Vec<RealArg>,
    /// Generated directory per model and scale, as MODEL=SCALE=DIR (repeatable)
    #[arg(long = "fake", value_name = "MODEL=SCALE=DIR", required = true)]
    fake: Vec<FakeArg>,
    /// Directory receiving report.csv, chart.csv, and chart.png
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Palette(#[from] PaletteError),
    #[error(transparent)]
    Crop(#[from] CropError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Fid(#[from] FidError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("{0}")]
    Invalid(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::ValidateData(args) => validate_data(args),
        Cmd::Precrop(args) => precrop(args),
        Cmd::Train(args) => train(args),
        Cmd::Infer(args) => infer(args),
        Cmd::Fid(args) => fid(args),
        Cmd::Report(args) => report(args),
    }
}

fn validate_data(args: ValidateDataArgs) -> Result<(), CliError> {
    let cfg = args.cfg.resolve(Overrides::default())?;
    let root = cfg.data_root()?;
    let palette = Palette::load(&root.join("palette.json"))?;
    let opts = LoadOptions::default();

    let mut lists = 0usize;
    for split in [Split::Train, Split::Test] {
        for mode in [PairMode::Paired, PairMode::Unpaired] {
            if !pairs_path(root, split, mode).is_file() {
                continue;
            }
            let index = load_dataset_index(root, split, mode)?;
            for (person, cloth) in &index.entries {
                load_sample_with_palette(root, split, person, cloth, palette.clone(), &opts)?;
            }
            println!("{split} {mode}: {} pairs ok", index.entries.len());
            lists += 1;
        }
    }
    if lists == 0 {
        return Err(CliError::Invalid(format!(
            "no pairs files found under {}",
            root.display()
        )));
    }
    println!("dataset {} valid ({} labels)", root.display(), palette.num_labels());
    Ok(())
}

fn precrop(args: PrecropArgs) -> Result<(), CliError> {
    let cfg = args.cfg.resolve(Overrides::default())?;
    let root = cfg.data_root()?;
    let manifest = precrop_dataset(root, &args.out, args.scale, args.seed, &cfg.crop, args.force)?;
    println!(
        "precrop: {} windows at scale {} -> {}",
        manifest.windows.len(),
        args.scale,
        args.out.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<(), CliError> {
    let ovr = Overrides {
        epochs: args.epochs,
        batch_size: args.batch_size,
        lr: args.lr,
        seed: args.seed,
        gan_mode: args.gan_mode,
        ..Overrides::default()
    };
    let cfg = args.cfg.resolve(ovr)?;
    let root = cfg.data_root()?;
    let tc = cfg.train_config(args.stage);
    let report = train_stage(&tc, root, &args.out)?;
    let last = report
        .records
        .last()
        .map_or(f32::NAN, |r| r.total);
    println!(
        "train {}: {} iterations, final loss {:.6}",
        report.stage, report.iterations, last
    );
    println!("checkpoint: {}", report.checkpoint_path.display());
    println!("losses: {}", report.csv_path.display());
    Ok(())
}

fn infer(args: InferArgs) -> Result<(), CliError> {
    let cfg = args.cfg.resolve(Overrides::default())?;
    let root = cfg.data_root()?;
    let ckpts = CheckpointSet::in_dir(&args.ckpts);
    let manifest = run_unpaired_inference(&ckpts, root, &args.out, &cfg.agnostic)?;
    println!(
        "infer: {} images at {}x{} -> {}",
        manifest.pairs.len(),
        manifest.image_size.0,
        manifest.image_size.1,
        args.out.display()
    );
    Ok(())
}

fn fid(args: FidArgs) -> Result<(), CliError> {
    let cfg = args.cfg.resolve(Overrides::default())?;
    let extractor = cfg.extractor();
    let real = accumulate_dir_stats(&args.real, &extractor)?;
    let fake = accumulate_dir_stats(&args.fake, &extractor)?;
    let d = frechet_distance(&real, &fake)?;
    eprintln!("[fid] n_real = {}, n_fake = {}", real.n, fake.n);
    println!("{d:.6}");
    Ok(())
}

fn report(args: ReportArgs) -> Result<(), CliError> {
    let cfg = args.cfg.resolve(Overrides::default())?;
    let extractor = cfg.extractor();
    let real: Vec<(f64, PathBuf)> = args.real.iter().map(|r| (r.scale, r.dir.clone())).collect();
    let fake: Vec<(String, f64, PathBuf)> = args
        .fake
        .iter()
        .map(|f| (f.model.clone(), f.scale, f.dir.clone()))
        .collect();
    let report = build_fid_report(&real, &fake, &extractor)?;

    print!("{}", report.to_csv());

    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).map_err(|source| CliError::Io {
            path: out.clone(),
            source,
        })?;
        let write = |name: &str, text: &str| -> Result<PathBuf, CliError> {
            let path = out.join(name);
            std::fs::write(&path, text).map_err(|source| CliError::Io {
                path: path.clone(),
                source,
            })?;
            Ok(path)
        };
        let report_path = write("report.csv", &report.to_csv())?;
        let chart_csv_path = write("chart.csv", &report.chart_csv())?;
        let chart = render_line_chart(
            "FID VS CROP SCALE",
            "CROP SCALE",
            "FID",
            &report.series(),
        );
        let chart_path = out.join("chart.png");
        chart.save_png_rgb(&chart_path)?;
        for p in [&report_path, &chart_csv_path, &chart_path] {
            eprintln!("[report] wrote {}", p.display());
        }
    }
    Ok(())
}

