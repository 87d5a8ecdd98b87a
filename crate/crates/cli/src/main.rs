mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "timelapse", version, about = "Learn and synthesize painting time-lapse videos")]
struct Cli {
    /// TOML run configuration; defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed overriding every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; by default a new timestamped run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct DataArg {
    /// Dataset directory produced by `gen-data`.
    #[arg(long, env = config::DATA_ROOT_ENV)]
    data: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum StageArg {
    Pairwise,
    SeqCvae,
    SeqSample,
    Full,
    Unet,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Ours,
    Interp,
    Unet,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic painting-video dataset with ground truth and a split manifest.
    GenData {
        #[arg(long)]
        n_videos: Option<usize>,
    },
    /// Extract frame-index sequences from the training videos.
    Extract {
        #[command(flatten)]
        data: DataArg,
    },
    /// Train the model (or the encoder-decoder baseline).
    Train {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Resume from a training checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Steps for this invocation (the stage budget, or a cap for `full`).
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Synthesize videos backward from a finished painting.
    Synthesize {
        #[arg(long, value_enum, default_value = "ours")]
        method: MethodArg,
        #[arg(long)]
        painting: PathBuf,
        #[arg(long, default_value_t = 1)]
        samples: usize,
        #[arg(long, default_value_t = timelapse_core::inference::DEFAULT_STEPS)]
        steps: usize,
        /// Model checkpoint (`ours`) or baseline checkpoint (`unet`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare methods on the test split.
    Evaluate {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "ours,interp,unet")]
        methods: Vec<MethodArg>,
        /// Model checkpoint, required for `ours`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Baseline checkpoint, required for `unet`.
        #[arg(long)]
        unet_checkpoint: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}
