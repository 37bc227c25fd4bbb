//! `pap` command-line interface.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::classifier::{grad_cam, ClassifierArch, ClassifierModel};
use crate::config::{ModeSelection, RunConfig};
use crate::crossval::{fold_plan_for, prepare_samples, run_crossval, write_cam, CrossvalSettings};
use crate::dataset::{generate_synthetic, load_dataset, write_dataset_tree, BinaryLabel, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::evaluation::{
    compare_runs, percent, read_run_report, write_comparison, write_run_csvs, write_run_files, Comparison, RunReport,
    REPORT_FILE,
};
use crate::imaging::{normalize01, read_image, resize_bilinear, to_rgb};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const DATA_ROOT_ENV: &str = "PAP_DATA_ROOT";
pub const CONFIG_ECHO_FILE: &str = "config_used.json";
pub const STATUS_FILE: &str = "status.json";

#[derive(Parser, Debug)]
#[command(
    name = "pap",
    version,
    about = "Cervical cell segmentation and classification pipeline"
)]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Scan a dataset tree and write manifest.json with class counts.
    Ingest {
        #[arg(long, env = DATA_ROOT_ENV)]
        data_root: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Generate a synthetic dataset tree.
    Synth {
        #[arg(long, default_value_t = 400)]
        n: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// k-fold cross-validation of the raw and/or segmented pipeline.
    Crossval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mode: Option<ModeArg>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = DATA_ROOT_ENV)]
        data_root: Option<PathBuf>,
    },
    /// Grad-CAM heatmap for one image and a trained classifier checkpoint.
    Cam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_enum)]
        class: ClassArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-render CSV files from the report.json files of a crossval output.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Raw,
    Segmented,
    Both,
}

impl From<ModeArg> for ModeSelection {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Raw => ModeSelection::Raw,
            ModeArg::Segmented => ModeSelection::Segmented,
            ModeArg::Both => ModeSelection::Both,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ClassArg {
    Normal,
    Abnormal,
}

impl From<ClassArg> for BinaryLabel {
    fn from(c: ClassArg) -> Self {
        match c {
            ClassArg::Normal => BinaryLabel::Normal,
            ClassArg::Abnormal => BinaryLabel::Abnormal,
        }
    }
}

/// Error tagged with the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Usage(Error),
    Runtime(Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(e) | Failure::Runtime(e) => e.fmt(f),
        }
    }
}

trait Tag<T> {
    fn usage(self) -> std::result::Result<T, Failure>;
    fn runtime(self) -> std::result::Result<T, Failure>;
}

impl<T> Tag<T> for Result<T> {
    fn usage(self) -> std::result::Result<T, Failure> {
        self.map_err(Failure::Usage)
    }

    fn runtime(self) -> std::result::Result<T, Failure> {
        self.map_err(Failure::Runtime)
    }
}

type CliResult = std::result::Result<(), Failure>;

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default())
        .filter_level(level)
        .parse_default_env()
        .try_init();
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}

fn dispatch(command: Command) -> CliResult {
    match command {
        Command::Ingest { data_root, out } => cmd_ingest(&data_root, &out),
        Command::Synth { n, seed, out } => cmd_synth(n, seed, &out),
        Command::Crossval {
            config,
            seed,
            mode,
            out,
            data_root,
        } => {
            let mut cfg = match config {
                Some(path) => RunConfig::load(&path).usage()?,
                None => RunConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(m) = mode {
                cfg.mode = m.into();
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            if let Some(d) = data_root {
                cfg.data_root = Some(d);
            }
            cmd_crossval(&cfg)
        }
        Command::Cam {
            checkpoint,
            image,
            class,
            out,
        } => cmd_cam(&checkpoint, &image, class.into(), &out),
        Command::Report { input } => cmd_report(&input),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_ingest(data_root: &Path, out: &Path) -> CliResult {
    let ingested = load_dataset(data_root).usage()?;
    if ingested.samples.is_empty() {
        return Err(Failure::Usage(Error::Dataset(format!(
            "{} contains no images",
            data_root.display()
        ))));
    }
    for w in &ingested.manifest.warnings {
        log::warn!("{w}");
    }
    create_dir(out).runtime()?;
    ingested.manifest.write(&out.join(MANIFEST_FILE)).runtime()?;
    println!("{}", ingested.manifest.summary());
    Ok(())
}

pub fn cmd_synth(n: usize, seed: u64, out: &Path) -> CliResult {
    let samples = generate_synthetic(n, seed).usage()?;
    create_dir(out).runtime()?;
    let manifest = write_dataset_tree(&samples, out).runtime()?;
    println!("{}", manifest.summary());
    Ok(())
}

#[derive(Serialize)]
struct Status<'a> {
    state: &'a str,
    completed_modes: Vec<&'a str>,
    error: Option<String>,
}

/// Combined top-level report for all modes of one crossval invocation.
#[derive(Serialize, serde::Deserialize)]
pub struct CombinedReport {
    pub runs: Vec<RunReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
}

pub fn cmd_crossval(cfg: &RunConfig) -> CliResult {
    cfg.validate().usage()?;
    let data_root = cfg.data_root.clone().ok_or_else(|| {
        Failure::Usage(Error::Config(format!(
            "no data root: set data_root in the config, pass --data-root or set {DATA_ROOT_ENV}"
        )))
    })?;
    let ingested = load_dataset(&data_root).usage()?;
    let samples = prepare_samples(&ingested.samples).usage()?;
    let plan = fold_plan_for(&samples, cfg.k, cfg.seed).usage()?;

    let out = &cfg.out_dir;
    create_dir(out).runtime()?;
    write_json(&out.join(CONFIG_ECHO_FILE), cfg).runtime()?;
    let status_path = out.join(STATUS_FILE);
    let mut done: Vec<&str> = Vec::new();
    let status = |state: &str, done: &[&str], error: Option<String>| {
        write_json(
            &status_path,
            &Status {
                state,
                completed_modes: done.to_vec(),
                error,
            },
        )
    };
    status("running", &done, None).runtime()?;

    let mut runs = Vec::new();
    for mode in cfg.mode.modes() {
        let mode_dir = out.join(mode.name());
        let settings = CrossvalSettings {
            arch: ClassifierArch::standard(),
            train: cfg.train_config(),
            aug: cfg.aug.clone(),
            unet: cfg.unet.clone(),
            seed: cfg.seed,
            workers: cfg.worker_count(),
            cam_samples: cfg.cam_samples,
            artifacts: Some(mode_dir.clone()),
        };
        log::info!("{}: {} samples, {} folds", mode.name(), samples.len(), plan.k);
        let result = run_crossval(&samples, &plan, mode, &settings).and_then(|report| {
            write_run_files(&report, &mode_dir)?;
            Ok(report)
        });
        match result {
            Ok(report) => {
                println!(
                    "{}: pooled accuracy {}%, F1 {}%",
                    mode.name(),
                    percent(report.pooled.accuracy),
                    percent(report.pooled.f1_weighted)
                );
                if let Some(d) = report.unet_val_dice() {
                    println!("{}: U-Net held-out Dice {d:.4}", mode.name());
                }
                done.push(mode.name());
                runs.push(report);
            }
            Err(e) => {
                let _ = status("failed", &done, Some(e.to_string()));
                return Err(Failure::Runtime(e));
            }
        }
    }
    let comparison = match runs.as_slice() {
        [raw, seg] => {
            let c = compare_runs(raw, seg);
            write_comparison(&c, out).runtime()?;
            Some(c)
        }
        _ => None,
    };
    write_json(&out.join(REPORT_FILE), &CombinedReport { runs, comparison }).runtime()?;
    status("complete", &done, None).runtime()?;
    Ok(())
}

pub fn cmd_cam(checkpoint: &Path, image: &Path, class: BinaryLabel, out: &Path) -> CliResult {
    let model = ClassifierModel::from_checkpoint(&Checkpoint::load(checkpoint).usage()?).usage()?;
    let img = read_image(image).usage()?;
    let size = model.arch().input_size;
    let input = normalize01(&resize_bilinear(&to_rgb(&img), size, size).usage()?);
    let cam = grad_cam(&model, &input, class).runtime()?;
    let stem = image
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image")
        .to_string();
    write_cam(&cam, out, &format!("{stem}_{}", class.name().to_ascii_lowercase())).runtime()?;
    Ok(())
}

/// Rewrites the CSVs next to every per-mode report.json under `input`
/// (or in `input` itself) and the comparison when both modes are present.
pub fn cmd_report(input: &Path) -> CliResult {
    let mut candidates: Vec<PathBuf> = vec![input.to_path_buf()];
    for name in ["raw", "segmented"] {
        candidates.push(input.join(name));
    }
    let mut runs = Vec::new();
    for dir in candidates {
        let path = dir.join(REPORT_FILE);
        if !path.is_file() {
            continue;
        }
        // the top-level combined report is not a single run
        let Ok(report) = read_run_report(&path) else {
            continue;
        };
        write_run_csvs(&report, &dir).runtime()?;
        runs.push(report);
    }
    if runs.is_empty() {
        return Err(Failure::Usage(Error::Config(format!(
            "no per-mode {REPORT_FILE} found under {}",
            input.display()
        ))));
    }
    let raw = runs.iter().find(|r| r.mode == crate::evaluation::PipelineMode::Raw);
    let seg = runs
        .iter()
        .find(|r| r.mode == crate::evaluation::PipelineMode::Segmented);
    if let (Some(raw), Some(seg)) = (raw, seg) {
        write_comparison(&compare_runs(raw, seg), input).runtime()?;
    }
    Ok(())
}
