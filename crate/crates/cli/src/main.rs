use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use overcnn_cli::commands::{self, Suite, TrainOverrides};
use overcnn_cli::error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "overcnn", version, about = "Over-parametrized CNN classifier experiments")]
struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, env = "THREADS", global = true)]
    threads: Option<usize>,

    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a dataset from a synthetic distribution.
    GenData { config: PathBuf },
    /// Train a network on a dataset file.
    Train {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "l-n")]
        l_n: Option<u64>,
        #[arg(long = "t-n")]
        t_n: Option<u64>,
    },
    /// Estimate risks of stored weights.
    Eval { config: PathBuf },
    /// Run a check battery; exits 1 if any check fails.
    Check {
        #[arg(value_enum)]
        suite: Suite,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Excess risk over a grid of sample sizes.
    RateStudy { config: PathBuf },
    /// Summarize a weight file.
    Inspect {
        weights: PathBuf,
        /// Topology JSON, needed for binary weight files.
        #[arg(long)]
        topology: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Config(format!("THREADS = {threads}: {e}")))?;
    }
    match cli.command {
        Command::GenData { config } => commands::gen_data(&config),
        Command::Train { config, seed, l_n, t_n } => commands::train_cmd(&config, &TrainOverrides { seed, l_n, t_n }),
        Command::Eval { config } => commands::eval_cmd(&config),
        Command::Check { suite, config, output } => commands::check_cmd(suite, config.as_deref(), output.as_deref()),
        Command::RateStudy { config } => commands::rate_study_cmd(&config),
        Command::Inspect { weights, topology } => commands::inspect_cmd(&weights, topology.as_ref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
