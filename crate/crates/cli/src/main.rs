//! Command-line driver for distillkit.
//!
//! Exit codes: 0 success, 1 internal error, 2 missing or unusable input,
//! 3 missing prerequisite, 4 unknown evaluation protocol, 5 unreadable data.

mod commands;
mod reference;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use distillkit::config::RunConfig;
use distillkit::pipeline::StageKind;
use distillkit::Error;

pub const OUT_DIR_ENV: &str = "DISTILLKIT_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "distillkit", version, about = "Multi-teacher feature distillation for toy vision transformers")]
struct Cli {
    /// Run configuration (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for checkpoints, statistics, metrics and reports.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = "runs")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Create the toy teacher checkpoints and export the evaluation corpus.
    Init,
    /// Compute teacher feature statistics.
    Calibrate,
    /// Run one training stage.
    Train {
        /// 1, 2, 3, stage2-only or stage1+3.
        #[arg(long)]
        stage: StageKind,
        /// Continue from the last periodic checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many steps, leaving a resumable checkpoint.
        #[arg(long, hide = true)]
        halt_after: Option<usize>,
    },
    /// Evaluate a frozen encoder.
    Eval {
        /// Encoder checkpoint; the latest student checkpoint in the output
        /// directory when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Corpus directory; `<out-dir>/corpus` when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Comma-separated protocols: knn, zeroshot, probe, pck, pca.
        #[arg(long, default_value = "knn,zeroshot,probe,pck,pca")]
        protocols: String,
    },
    /// Write PCA-to-RGB renderings of patch tokens as PPM files.
    Visualize {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Render at every scale of the resolution pyramid.
        #[arg(long)]
        multi_res: bool,
    },
    /// Print the documented default configuration.
    ConfigReference,
}

/// Failure carrying its exit code.
#[derive(Debug)]
pub enum Failure {
    Core(Error),
    UnknownProtocol(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::UnknownProtocol(_) => 4,
            Failure::Core(e) => match e {
                Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
                Error::Config(_) | Error::Dimension(_) => 2,
                Error::State(_) => 3,
                Error::Format(_) | Error::Truncated(_) | Error::Version { .. } => 5,
                _ => 1,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Core(e) => e.to_string(),
            Failure::UnknownProtocol(m) => m.clone(),
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
            other => other,
        })?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Command::ConfigReference = cli.command {
        print!("{}", reference::config_reference()?);
        return Ok(());
    }
    let cfg = load_config(&cli)?;
    let out = cli.out_dir.as_path();
    match cli.command {
        Command::Init => commands::init(&cfg, out),
        Command::Calibrate => commands::calibrate(&cfg, out),
        Command::Train { stage, resume, halt_after } => commands::train(&cfg, out, stage, resume, halt_after),
        Command::Eval { checkpoint, corpus, protocols } => {
            commands::eval(&cfg, out, checkpoint.as_deref(), corpus.as_deref(), &protocols)
        }
        Command::Visualize { checkpoint, corpus, multi_res } => {
            commands::visualize(&cfg, out, checkpoint.as_deref(), corpus.as_deref(), multi_res)
        }
        Command::ConfigReference => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
