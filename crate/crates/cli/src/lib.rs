//! Command-line driver: `train`, `eval`, `verify` and `export`.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::{ExportMode, Overrides};
use mematch_core::numcore::Fault;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

/// An error together with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn verification(error: anyhow::Error) -> Self {
        Self { code: EXIT_VERIFY, error }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let nan = error
            .chain()
            .any(|e| matches!(e.downcast_ref::<mematch_core::Error>(), Some(mematch_core::Error::NanLoss { .. })));
        Self { code: if nan { EXIT_NUMERICAL } else { EXIT_CONFIG }, error }
    }
}

impl From<mematch_core::Error> for Failure {
    fn from(e: mematch_core::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

#[derive(Debug, Parser)]
#[command(name = "mematch", version, about = "Few-shot image recognition with memory matching networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model, writing checkpoints and a metrics CSV.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Continue from the checkpoint at the configured path.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        episode: EpisodeArgs,
        /// Append the result to this CSV file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in gradient, memory and oracle checks.
    Verify {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, hide = true, value_enum)]
        inject_fault: Option<FaultArg>,
    },
    /// Write a similarity matrix or query embeddings for one test episode.
    Export {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        episode: EpisodeArgs,
        #[arg(long, value_enum, default_value = "similarity")]
        mode: ExportMode,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Worker threads for evaluation (0 = all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EpisodeArgs {
    #[arg(long)]
    pub ways: Option<usize>,
    #[arg(long)]
    pub shots: Option<usize>,
    /// Query images per class.
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub episodes: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FaultArg {
    ConvSign,
}

fn overrides(common: CommonArgs, episode: Option<EpisodeArgs>, out: Option<PathBuf>) -> Overrides {
    let episode = episode.unwrap_or(EpisodeArgs { ways: None, shots: None, queries: None, episodes: None });
    Overrides {
        config: common.config,
        seed: common.seed,
        checkpoint: common.checkpoint,
        ways: episode.ways,
        shots: episode.shots,
        queries: episode.queries,
        episodes: episode.episodes,
        threads: common.threads,
        out,
    }
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<(), Failure> {
    match cli.command {
        Command::Train { common, resume } => commands::train(&overrides(common, None, None), resume, out).map(drop),
        Command::Eval { common, episode, out: csv } => {
            commands::eval(&overrides(common, Some(episode), csv), out).map(drop)
        }
        Command::Verify { seed, inject_fault } => {
            let fault = inject_fault.map(|FaultArg::ConvSign| Fault::ConvBackwardSign);
            commands::verify(seed, fault, out).map(drop)
        }
        Command::Export { common, episode, mode, out: path } => {
            commands::export(&overrides(common, Some(episode), path), mode, out).map(drop)
        }
    }
}

/// Parses `args`, runs the command and returns the exit code. Errors go to
/// stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            f.code
        }
    }
}
