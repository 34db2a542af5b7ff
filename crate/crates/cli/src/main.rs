//! `lvseg`: left-ventricle segmentation and volumetry from the command line.
//!
//! Every invocation writes into a fresh run directory
//! `<runs>/<UTC timestamp>-<config hash>/` holding `config.toml` (the
//! resolved configuration) and the stage outputs.
//!
//! Exit codes: 0 success, 2 invalid arguments or configuration, 3 bad or
//! missing input data, 4 internal error.

mod bundle;
mod commands;
mod config;

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use commands::{MaskSource, Source};
use config::Config;

/// Marks an error caused by arguments or configuration (exit code 2).
#[derive(Debug)]
pub struct Invalid(pub String);

/// Marks an error caused by the input data (exit code 3).
#[derive(Debug)]
pub struct DataError(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}
impl std::error::Error for DataError {}

#[derive(Parser, Debug)]
#[command(
    name = "lvseg",
    version,
    about = "Left-ventricle segmentation and volumetry"
)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for weight init, splits, shuffling and augmentation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-patient stages (0 = all CPUs).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Parent directory for run directories [default: runs].
    #[arg(long, global = true)]
    runs_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct SourceArgs {
    /// Directory with one subdirectory of DICOM files per patient.
    #[arg(long)]
    dicom: Option<PathBuf>,
    /// Directory of `<patient>.nii` files (labels in `<patient>_gt.nii`).
    #[arg(long)]
    nifti: Option<PathBuf>,
}

impl SourceArgs {
    fn source(&self) -> Source {
        match (&self.dicom, &self.nifti) {
            (Some(d), _) => Source::Dicom(d.clone()),
            (_, Some(n)) => Source::Nifti(n.clone()),
            _ => unreachable!("clap enforces one source"),
        }
    }
}

#[derive(Args, Debug)]
struct SegmentArgs {
    /// Weight files; several are combined by the configured ensemble mode.
    #[arg(long = "weights", conflicts_with = "oracle_masks")]
    weights: Vec<PathBuf>,
    /// Directory of mask bundles used in place of network predictions.
    #[arg(long)]
    oracle_masks: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert DICOM or NIfTI studies into canonical study directories.
    Ingest {
        #[command(flatten)]
        source: SourceArgs,
    },
    /// Detect the LV region of interest of each study.
    Roi {
        /// Directory of canonical studies.
        #[arg(long)]
        studies: PathBuf,
    },
    /// Orient, resample, crop and normalize each study.
    Preprocess {
        #[arg(long)]
        studies: PathBuf,
    },
    /// Train a U-Net on preprocessed studies with ground-truth masks.
    Train {
        /// Directory of preprocessed bundles.
        #[arg(long)]
        prepared: PathBuf,
    },
    /// Predict masks for preprocessed studies.
    Segment {
        #[arg(long)]
        prepared: PathBuf,
        #[command(flatten)]
        with: SegmentArgs,
    },
    /// Remove spurious components from predicted masks.
    Postproc {
        /// Directory of mask bundles.
        #[arg(long)]
        masks: PathBuf,
    },
    /// Compute ESV, EDV and EF per patient.
    Volume {
        #[arg(long)]
        masks: PathBuf,
        /// Mask bundles from a second model, used for ESV only. EDV still
        /// comes from `--masks`.
        #[arg(long)]
        esv_masks: Option<PathBuf>,
    },
    /// Compare predicted volumes with reference volumes.
    Eval {
        /// `volumes.csv` from the volume stage.
        #[arg(long)]
        volumes: PathBuf,
        /// CSV with columns patient_id, esv_ml, edv_ml.
        #[arg(long)]
        truth: PathBuf,
    },
    /// Run every stage from raw studies to volumes (and a report when
    /// reference volumes are given). Without weights or `--oracle`, a model
    /// is trained first.
    Pipeline {
        #[command(flatten)]
        source: SourceArgs,
        /// Trained weight files to segment with.
        #[arg(long = "weights", conflicts_with = "oracle")]
        weights: Vec<PathBuf>,
        /// Use the ground-truth masks in place of predictions.
        #[arg(long)]
        oracle: bool,
        /// Reference volumes CSV; when given, an evaluation report is written.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
}

/// Creates `<root>/<timestamp>-<hash>`, adding a numeric suffix on collision.
fn create_run_dir(root: &Path, cfg: &Config) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
    let base = format!(
        "{}-{}",
        chrono::Utc::now().format("%Y%m%dT%H%M%SZ"),
        cfg.hash()
    );
    for n in 0.. {
        let name = if n == 0 {
            base.clone()
        } else {
            format!("{base}-{n}")
        };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!()
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = Config::load(cli.config.as_deref())?.resolve(cli.seed, cli.jobs)?;
    if let Some(root) = cli.runs_dir {
        cfg.runs_dir = Some(root);
    }
    let root = cfg
        .runs_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs"));
    let run = create_run_dir(&root, &cfg)?;
    fs::write(run.join("config.toml"), cfg.to_toml())?;
    println!("run directory: {}", run.display());

    match &cli.command {
        Command::Ingest { source } => {
            let ids = commands::ingest(&cfg, &source.source(), &run.join("studies"))?;
            println!("ingested {} patients", ids.len());
        }
        Command::Roi { studies } => {
            let reports = commands::roi(&cfg, studies, &run.join("roi"))?;
            let found = reports.iter().filter(|r| r.rect.is_some()).count();
            println!("roi found for {found}/{} patients", reports.len());
        }
        Command::Preprocess { studies } => {
            let ids = commands::preprocess(&cfg, studies, &run.join("prepared"))?;
            println!("preprocessed {} patients", ids.len());
        }
        Command::Train { prepared } => {
            let weights = commands::train(&cfg, prepared, &run.join("model"))?;
            println!("weights: {}", weights.display());
        }
        Command::Segment { prepared, with } => {
            let source = match &with.oracle_masks {
                Some(dir) => MaskSource::Oracle(dir.clone()),
                None => MaskSource::Weights(with.weights.clone()),
            };
            let ids = commands::segment(&cfg, prepared, &source, &run.join("masks"))?;
            println!("segmented {} patients", ids.len());
        }
        Command::Postproc { masks } => {
            let ids = commands::postproc(&cfg, masks, &run.join("filtered"))?;
            println!("filtered {} patients", ids.len());
        }
        Command::Volume { masks, esv_masks } => {
            let rows =
                commands::volume(&cfg, masks, esv_masks.as_deref(), &run.join("volumes.csv"))?;
            print_volumes(&rows);
        }
        Command::Eval { volumes, truth } => {
            let report = commands::eval(&cfg, volumes, truth, &run.join("report"))?;
            print_summary(&report);
        }
        Command::Pipeline {
            source,
            weights,
            oracle,
            truth,
        } => {
            let studies = run.join("studies");
            let prepared = run.join("prepared");
            commands::ingest(&cfg, &source.source(), &studies)?;
            if cfg.roi.crop {
                commands::roi(&cfg, &studies, &run.join("roi"))?;
            }
            commands::preprocess(&cfg, &studies, &prepared)?;
            let mask_source = if *oracle {
                MaskSource::Oracle(prepared.clone())
            } else if weights.is_empty() {
                MaskSource::Weights(vec![commands::train(&cfg, &prepared, &run.join("model"))?])
            } else {
                MaskSource::Weights(weights.clone())
            };
            commands::segment(&cfg, &prepared, &mask_source, &run.join("masks"))?;
            commands::postproc(&cfg, &run.join("masks"), &run.join("filtered"))?;
            let rows =
                commands::volume(&cfg, &run.join("filtered"), None, &run.join("volumes.csv"))?;
            print_volumes(&rows);
            if let Some(truth) = truth {
                let report =
                    commands::eval(&cfg, &run.join("volumes.csv"), truth, &run.join("report"))?;
                print_summary(&report);
            }
        }
    }
    Ok(())
}

fn print_volumes(rows: &[commands::VolumeRow]) {
    let fmt = |v: Option<f64>| v.map_or(String::from("-"), |v| format!("{v:.1}"));
    for r in rows {
        println!(
            "{}: ESV {} ml, EDV {} ml, EF {} {}",
            r.patient_id,
            fmt(r.esv_ml),
            fmt(r.edv_ml),
            r.ef.map_or(String::from("-"), |v| format!("{:.3}", v)),
            if r.status == "ok" {
                r.flags.as_str()
            } else {
                r.status.as_str()
            }
        );
    }
}

fn print_summary(report: &lvseg::eval::EvalReport) {
    let s = &report.summary;
    let fmt = |v: Option<f64>| v.map_or(String::from("-"), |v| format!("{v:.3}"));
    println!(
        "{} patients: ESV RMSE {} ml, EDV RMSE {} ml, EF RMSE {}, class accuracy {}",
        s.n_patients,
        fmt(s.esv_rmse_ml),
        fmt(s.edv_rmse_ml),
        fmt(s.ef_rmse_fraction),
        fmt(s.accuracy)
    );
}

/// Maps an error chain to an exit code.
fn exit_code(err: &anyhow::Error) -> u8 {
    use lvseg::eval::EvalError;
    use lvseg::imgproc::ImgprocError;
    use lvseg::unet::UnetError;

    for cause in err.chain() {
        if cause.is::<Invalid>() {
            return 2;
        }
        if cause.is::<DataError>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<UnetError>() {
            return match e {
                UnetError::InvalidConfig(_)
                | UnetError::InvalidHyper(_)
                | UnetError::ConfigMismatch(_) => 2,
                UnetError::DivergedLoss { .. } => 4,
                _ => 3,
            };
        }
        if let Some(e) = cause.downcast_ref::<ImgprocError>() {
            return if matches!(e, ImgprocError::InvalidRecipe(_)) {
                2
            } else {
                3
            };
        }
        if let Some(e) = cause.downcast_ref::<EvalError>() {
            return if matches!(e, EvalError::InvalidBands(_)) {
                2
            } else {
                3
            };
        }
        if cause.is::<lvseg::ingest::IngestError>()
            || cause.is::<lvseg::roi::RoiError>()
            || cause.is::<lvseg::postproc::PostprocError>()
            || cause.is::<lvseg::volume::VolumeError>()
            || cause.is::<io::Error>()
            || cause.is::<csv::Error>()
            || cause.is::<serde_json::Error>()
        {
            return 3;
        }
    }
    4
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
