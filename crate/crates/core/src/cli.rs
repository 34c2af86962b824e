//! The `lumacurve` command line.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage or
//! configuration error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::augment;
use crate::classic::{self, ClassicConfig, Minkowski};
use crate::color::{Illuminant, LinearImage};
use crate::error::{Error, Result};
use crate::eval::{self, RobustnessReport};
use crate::model;
use crate::pfm;
use crate::synth::{self, DatasetParams};
use crate::trainer::{self, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "lumacurve", version, about = "Brightness-robust illuminant estimation toolkit")]
pub struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, env = "LUMACURVE_SEED")]
    pub seed: Option<u64>,
    /// Maximum number of worker threads.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        scenes: usize,
        #[arg(long, default_value_t = 5)]
        illuminants: usize,
        #[arg(long, default_value_t = 8)]
        positions: usize,
        #[arg(long, default_value_t = 64)]
        res: usize,
    },
    /// Train a model.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON training configuration; flags override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        bre: Option<Switch>,
        /// Output directory for checkpoints and the metric log.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        with_clean_loss: bool,
    },
    /// Evaluate one checkpoint on both splits.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Compare checkpoints on both splits, smoothing their metric logs.
    Robustness {
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "ckpt", required = true)]
        ckpts: Vec<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = eval::DEFAULT_SMOOTHING_WINDOW)]
        window: usize,
    },
    /// Run a classical estimator on one image.
    Classic {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        /// Minkowski norm; `inf` for the maximum.
        #[arg(long)]
        p: Option<String>,
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
    },
    /// Apply one adversarial brightness step to an image.
    Augment {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Adversarial image (PFM).
        #[arg(long)]
        out: PathBuf,
        /// Adversarial curve weights (JSON).
        #[arg(long)]
        curve_out: PathBuf,
        /// Ground-truth illuminant `r,g,b`; defaults to the gray-world estimate.
        #[arg(long, value_delimiter = ',')]
        label: Option<Vec<f64>>,
        #[arg(long, default_value_t = crate::tone_curve::DEFAULT_SEGMENTS)]
        segments: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    GrayWorld,
    WhitePatch,
    ShadesOfGray,
    GrayEdge,
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let mut out = std::io::stdout().lock();
    match execute(cli, &mut out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

fn require_exists(flag: &str, path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{flag}: {} does not exist", path.display())))
    }
}

fn write_line(out: &mut dyn Write, line: std::fmt::Arguments) -> Result<()> {
    out.write_fmt(line)
        .and_then(|_| out.write_all(b"\n"))
        .map_err(|e| Error::io("<stdout>", e))
}

/// Runs a parsed command, writing human-readable output to `out`.
pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::Config("--workers: must be >= 1".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let seed = cli.seed;
    match cli.command {
        Command::Synth {
            out: dir,
            scenes,
            illuminants,
            positions,
            res,
        } => {
            let params = DatasetParams {
                seed: seed.unwrap_or(0),
                n_scenes: scenes,
                n_illuminants: illuminants,
                n_positions: positions,
                resolution: res,
            };
            params.validate()?;
            let manifest = synth::generate_dataset(&dir, &params)?;
            let train = manifest.split(synth::Split::Train).count();
            let test = manifest.records.len() - train;
            write_line(
                out,
                format_args!("wrote {} images ({train} train, {test} test) to {}", manifest.records.len(), dir.display()),
            )
        }
        Command::Train {
            data,
            config,
            bre,
            out: dir,
            epochs,
            batch_size,
            with_clean_loss,
        } => {
            require_exists("--data", &data)?;
            let mut cfg = match &config {
                Some(p) => {
                    require_exists("--config", p)?;
                    TrainConfig::from_file(p)?
                }
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(b) = bre {
                cfg.bre_enabled = b == Switch::On;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(b) = batch_size {
                cfg.batch_size = b;
            }
            if with_clean_loss {
                cfg.with_clean_loss = true;
            }
            cfg.validate()?;
            let (run, paths) = trainer::train(&data, &cfg, &dir)?;
            let last = run.log.iter().rev().find(|r| r.split == "train");
            write_line(
                out,
                format_args!(
                    "trained {} epochs ({} steps, bre {}); final train mean {:.4}; best epoch {}; checkpoint {}",
                    cfg.epochs,
                    run.steps,
                    if cfg.bre_enabled { "on" } else { "off" },
                    last.map_or(f64::NAN, |r| r.summary.mean),
                    run.best_epoch,
                    paths.final_checkpoint.display()
                ),
            )
        }
        Command::Eval { data, ckpt, report } => {
            require_exists("--data", &data)?;
            require_exists("--ckpt", &ckpt)?;
            let rep = robustness(&data, &[ckpt], eval::DEFAULT_SMOOTHING_WINDOW, &report)?;
            for r in &rep.rows {
                write_line(
                    out,
                    format_args!(
                        "{}: train mean {:.4}, test mean {:.4}, error increase {:.2}%",
                        r.model, r.train.mean, r.test.mean, r.error_increase
                    ),
                )?;
            }
            Ok(())
        }
        Command::Robustness {
            data,
            ckpts,
            report,
            window,
        } => {
            require_exists("--data", &data)?;
            for c in &ckpts {
                require_exists("--ckpt", c)?;
            }
            if window == 0 {
                return Err(Error::Config("--window: must be >= 1".into()));
            }
            let rep = robustness(&data, &ckpts, window, &report)?;
            for r in &rep.rows {
                write_line(
                    out,
                    format_args!(
                        "{}: train mean {:.4}, test mean {:.4}, error increase {:.2}%",
                        r.model, r.train.mean, r.test.mean, r.error_increase
                    ),
                )?;
            }
            Ok(())
        }
        Command::Classic {
            image,
            method,
            p,
            sigma,
        } => {
            require_exists("--image", &image)?;
            let img = pfm::read_pfm(&image)?;
            let e = classic_estimate(&img, method, p.as_deref(), sigma)?;
            let [r, g, b] = e.rgb();
            write_line(out, format_args!("{r:.6} {g:.6} {b:.6}"))
        }
        Command::Augment {
            image,
            ckpt,
            out: out_path,
            curve_out,
            label,
            segments,
        } => {
            require_exists("--image", &image)?;
            require_exists("--ckpt", &ckpt)?;
            if segments == 0 {
                return Err(Error::Config("--segments: must be >= 1".into()));
            }
            let img = pfm::read_pfm(&image)?;
            let (weights, _) = model::load_checkpoint(&ckpt)?;
            let label = match label {
                Some(v) if v.len() != 3 => {
                    return Err(Error::Config(format!("--label: expected r,g,b, got {} values", v.len())))
                }
                Some(v) => crate::color::normalize_illuminant([v[0], v[1], v[2]])
                    .map_err(|e| Error::Config(format!("--label: {e}")))?,
                None => classic::gray_world(&img)?,
            };
            let (adv, theta) = augment::augment_image(&img, &label, &weights, segments, seed.unwrap_or(0))?;
            pfm::write_pfm(&out_path, &adv)?;
            let json = serde_json::to_string_pretty(&theta).expect("curve serialises");
            fs::write(&curve_out, json).map_err(|e| Error::io(&curve_out, e))?;
            write_line(out, format_args!("wrote {} and {}", out_path.display(), curve_out.display()))
        }
    }
}

/// Parses a Minkowski norm: a number ≥ 1, or `inf`.
pub fn parse_minkowski(s: &str) -> Result<Minkowski> {
    match s.trim().to_ascii_lowercase().as_str() {
        "inf" | "infinity" | "max" => Ok(Minkowski::Infinity),
        t => {
            let p: f64 = t
                .parse()
                .map_err(|_| Error::Config(format!("--p: expected a number or inf, got {s:?}")))?;
            if p.is_infinite() && p > 0.0 {
                Ok(Minkowski::Infinity)
            } else {
                Ok(Minkowski::Finite(p))
            }
        }
    }
}

fn classic_estimate(img: &LinearImage, method: Method, p: Option<&str>, sigma: f64) -> Result<Illuminant> {
    let cfg = |order: u32, p: Minkowski, sigma: f64| {
        ClassicConfig::new(order, p, sigma).map_err(|e| Error::Config(format!("estimator parameters: {e}")))
    };
    let p = p.map(parse_minkowski).transpose()?;
    let cfg = match method {
        Method::GrayWorld => cfg(0, Minkowski::Finite(1.0), sigma)?,
        Method::WhitePatch => cfg(0, Minkowski::Infinity, sigma)?,
        Method::ShadesOfGray => cfg(0, p.unwrap_or(Minkowski::Finite(6.0)), sigma)?,
        Method::GrayEdge => cfg(1, p.unwrap_or(Minkowski::Finite(6.0)), sigma)?,
    };
    classic::estimate_unified(img, &cfg)
}

fn model_name(ckpt: &Path) -> String {
    let stem = ckpt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match ckpt.parent().and_then(|p| p.file_name()) {
        Some(dir) => format!("{}/{stem}", dir.to_string_lossy()),
        None => stem,
    }
}

fn robustness(data: &Path, ckpts: &[PathBuf], window: usize, report: &Path) -> Result<RobustnessReport> {
    let manifest = synth::DatasetManifest::read(data)?;
    let dataset = synth::load_dataset(data, &manifest)?;
    if dataset.train.is_empty() || dataset.test.is_empty() {
        return Err(Error::Config("--data: both splits must be non-empty".into()));
    }
    let mut rep = RobustnessReport::default();
    for ckpt in ckpts {
        let (weights, _) = model::load_checkpoint(ckpt)?;
        let arch = weights.architecture().clone();
        let prep = |s: &[synth::Sample]| -> Result<Vec<synth::Sample>> {
            s.iter()
                .map(|x| {
                    Ok(synth::Sample {
                        image: model::prepare_input(&x.image, &arch)?,
                        label: x.label,
                    })
                })
                .collect()
        };
        let log_path = ckpt.with_file_name(trainer::METRICS_FILE);
        let log = if log_path.exists() {
            Some(eval::read_metric_log(&log_path)?)
        } else {
            None
        };
        rep.rows.push(eval::robustness_row(
            &model_name(ckpt),
            &weights,
            &prep(&dataset.train)?,
            &prep(&dataset.test)?,
            log.as_deref(),
            window,
        )?);
    }
    rep.write(report, (dataset.train.len(), dataset.test.len()))?;
    Ok(rep)
}
