mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{EvalArgs, MaskArgs, UndersampleArgs};
use config::{Overrides, RunConfig};
use error::CliError;

/// Learned probabilistic k-space undersampling experiments.
#[derive(Parser, Debug)]
#[command(name = "kspace", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by config-driven commands; they override config keys.
#[derive(Args, Debug, Default)]
struct RunFlags {
    /// TOML run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

impl RunFlags {
    fn load(&self) -> Result<RunConfig, CliError> {
        let ov = Overrides {
            rate: self.rate,
            size: self.size,
            seed: self.seed,
            depth: self.depth,
            epochs: self.epochs,
            out: self.out.clone(),
            threads: self.threads,
        };
        let cfg = RunConfig::load(self.config.as_deref(), &ov)?;
        if cfg.threads > 0 {
            // Only the first call can size the global pool; later calls are no-ops.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build_global();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a sampling mask (a baseline family or `probabilistic`)
    Mask {
        #[arg(long)]
        family: String,
        #[arg(long)]
        rate: f64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Probability matrix for the probabilistic family (uniform when omitted)
        #[arg(long)]
        probabilities: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Zero-filled reconstruction of an image or k-space grid under a mask
    Undersample {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Reference image (defaults to the fully sampled input)
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Jointly train the probability matrix and the reconstruction network
    Train {
        #[command(flatten)]
        run: RunFlags,
        /// Continue from the checkpoint in the output directory
        #[arg(long)]
        resume: bool,
    },
    /// Compare masks across rates and write a comparison table
    Compare {
        #[command(flatten)]
        run: RunFlags,
    },
    /// Evaluate a mask (and network) on the test split, or score one image
    Eval {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Radial and axis profiles of a probability matrix
    Profile {
        #[arg(long)]
        probabilities: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Write synthetic phantoms and a manifest
    Phantoms {
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Mask { family, rate, size, seed, probabilities, out } => {
            commands::cmd_mask(&MaskArgs { family, rate, size, seed, probabilities, out })
        }
        Command::Undersample { input, mask, truth, out } => {
            commands::cmd_undersample(&UndersampleArgs { input, mask, truth, out })
        }
        Command::Train { run, resume } => commands::cmd_train(&run.load()?, resume),
        Command::Compare { run } => commands::cmd_compare(&run.load()?),
        Command::Eval { run, mask, params, image, truth } => {
            let cfg = if image.is_some() { RunConfig::default() } else { run.load()? };
            commands::cmd_eval(&cfg, &EvalArgs { mask, params, image, truth })
        }
        Command::Profile { probabilities, out } => commands::cmd_profile(&probabilities, &out),
        Command::Phantoms { count, size, seed, out } => commands::cmd_phantoms(count, size, seed, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
