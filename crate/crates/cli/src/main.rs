//! `distillbev` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 invalid configuration, 3 runtime
//! failure (I/O, malformed files, divergence).

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::config::ExperimentConfig;

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "invalid configuration: {m}"),
            Failure::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<distillbev::Error> for Failure {
    fn from(e: distillbev::Error) -> Self {
        match e {
            distillbev::Error::InvalidConfig(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "distillbev",
    version,
    about = "Synthetic BEV benchmark for cross-modal feature distillation",
    long_about = "Synthetic BEV benchmark for cross-modal feature distillation.\n\n\
        Every subcommand reads an optional TOML experiment config (--config). Unknown keys are \
        rejected. Paths left unset derive from `out_dir` in the config: data in <out_dir>/data, \
        teacher checkpoint <out_dir>/teacher.dbw, student runs in <out_dir>/distill-on or \
        <out_dir>/distill-off."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML experiment config; built-in defaults when omitted (listed under --help)
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Overrides `seed` from the config [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a DBS1 dataset directory with its manifest.toml
    Gen {
        #[command(flatten)]
        common: Common,
        /// Output directory [default: <out_dir>/data]
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Number of scenes [default: data.train_scenes + data.eval_scenes = 320]
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the teacher on the training split and write its checkpoint
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        /// Dataset directory [default: <out_dir>/data]
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Checkpoint path [default: <out_dir>/teacher.dbw]
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Train a student (distillation per train.distill) and write checkpoint and metrics
    Distill {
        #[command(flatten)]
        common: Common,
        /// Dataset directory [default: <out_dir>/data]
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Teacher checkpoint [default: <out_dir>/teacher.dbw]
        #[arg(long, value_name = "FILE")]
        teacher: Option<PathBuf>,
        /// Run directory for student.dbw, metrics.csv and layer_losses.csv
        /// [default: <out_dir>/distill-on or <out_dir>/distill-off]
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Print evaluation metrics of a student on the evaluation split as TOML
    Eval {
        #[command(flatten)]
        common: Common,
        /// Dataset directory [default: <out_dir>/data]
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Teacher checkpoint [default: <out_dir>/teacher.dbw]
        #[arg(long, value_name = "FILE")]
        teacher: Option<PathBuf>,
        /// Student checkpoint [default: <run dir>/student.dbw]
        #[arg(long, value_name = "FILE")]
        student: Option<PathBuf>,
    },
    /// Write region labels, M, S and attention maps of one scene as PNG and NPY
    ///
    /// Files: labels, mask_m, scaling_s, attention_teacher, attention_student and
    /// attention_combined, each as .png and .npy. Label codes are TN 0, FP 1, FN 2,
    /// TP 3 (PNG gray levels 0, 85, 170, 255); other PNGs are min-max scaled.
    Masks {
        #[command(flatten)]
        common: Common,
        /// Scene file (.dbs1)
        #[arg(long, value_name = "FILE")]
        sample: PathBuf,
        /// Teacher checkpoint [default: <out_dir>/teacher.dbw]
        #[arg(long, value_name = "FILE")]
        teacher: Option<PathBuf>,
        /// Student checkpoint [default: <out_dir>/distill-on/student.dbw]
        #[arg(long, value_name = "FILE")]
        student: Option<PathBuf>,
        /// Distilled layer to inspect (B1, B2 or H)
        #[arg(long, default_value = "H")]
        layer: String,
        /// Output directory [default: <out_dir>/masks/<sample stem>]
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// PNG pixels per cell
        #[arg(long, default_value_t = 8)]
        scale: usize,
    },
    /// Render metrics CSVs as SVG learning curves, distillation on vs. off
    Plot {
        #[command(flatten)]
        common: Common,
        /// Distillation-on metrics [default: <out_dir>/distill-on/metrics.csv]
        #[arg(long, value_name = "FILE")]
        on: Option<PathBuf>,
        /// Distillation-off metrics [default: <out_dir>/distill-off/metrics.csv]
        #[arg(long, value_name = "FILE")]
        off: Option<PathBuf>,
        /// SVG path [default: <out_dir>/curves.svg]
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Gen { common, out, count } => commands::gen(&load(&common)?, out, count),
        Command::TrainTeacher { common, data, out } => {
            commands::train_teacher(&load(&common)?, data, out)
        }
        Command::Distill {
            common,
            data,
            teacher,
            out,
        } => commands::distill(&load(&common)?, data, teacher, out),
        Command::Eval {
            common,
            data,
            teacher,
            student,
        } => commands::eval(&load(&common)?, data, teacher, student),
        Command::Masks {
            common,
            sample,
            teacher,
            student,
            layer,
            out,
            scale,
        } => commands::masks(
            &load(&common)?,
            &commands::MaskArgs {
                sample,
                teacher,
                student,
                layer,
                out,
                scale,
            },
        ),
        Command::Plot {
            common,
            on,
            off,
            out,
        } => commands::plot(&load(&common)?, on, off, out),
    }
}

fn command() -> clap::Command {
    let defaults = format!(
        "Default configuration (every key optional):\n\n{}",
        ExperimentConfig::default_toml()
    );
    let mut cmd = Cli::command().after_long_help(defaults.clone());
    let names: Vec<String> = cmd
        .get_subcommands()
        .map(|s| s.get_name().to_string())
        .collect();
    for n in names {
        let text = defaults.clone();
        cmd = cmd.mut_subcommand(n, move |s| s.after_long_help(text));
    }
    cmd
}

fn main() -> ExitCode {
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
