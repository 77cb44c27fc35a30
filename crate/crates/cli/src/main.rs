mod config;
mod run;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dpicl_core::accounting::AccountingError;
use dpicl_core::aggregation::AggregationError;
use dpicl_core::backend::BackendError;

use config::{BackendKind, KsaKind};

#[derive(Parser, Debug)]
#[command(name = "dpicl", version, about = "Private in-context learning over an exemplar store")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendKind>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `profile.endpoint_url`.
    #[arg(long, global = true)]
    endpoint_url: Option<String>,
    /// Attach raw ensemble histograms to every result. The output is NOT private.
    #[arg(long, global = true)]
    privacy_off_debug: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Private label prediction by noisy argmax over ensemble votes.
    Classify(PipelineArgs),
    /// Private generation by noisy mean of ensemble output embeddings.
    Esa(PipelineArgs),
    /// Private generation from keywords released out of ensemble outputs.
    Ksa {
        #[command(flatten)]
        args: PipelineArgs,
        #[arg(long, value_enum)]
        method: Option<KsaKind>,
    },
    /// Noise level for a target budget over a number of queries.
    Calibrate(CalibrateArgs),
    /// Total privacy spent by a ledger file.
    Account {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        delta: f64,
    },
    /// Scores predictions against references.
    Score {
        /// JSONL records with an `answer` field (the pipelines' result files).
        #[arg(long)]
        predictions: PathBuf,
        /// JSONL records with a `reference` or `answer` field, in the same order.
        #[arg(long)]
        references: PathBuf,
        /// Writes the per-example report here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Default)]
pub struct PipelineArgs {
    /// Exemplar JSONL (`{"input": .., "answer": ..}` per line).
    #[arg(long)]
    pub exemplars: Option<PathBuf>,
    /// Query file: JSONL with a `query` field, or one query per line.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Result JSONL, truncated at start.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Ledger JSONL, appended to. Defaults to `<output stem>.ledger.jsonl` next to the output.
    #[arg(long)]
    pub ledger: Option<PathBuf>,
    /// Target epsilon for the whole query file; noise is calibrated from it.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    /// Explicit noise multiplier (classify, esa, ksa ptr).
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Explicit per-query epsilon of the joint keyword mechanism.
    #[arg(long)]
    pub em_epsilon: Option<f64>,
    /// Explicit epsilon for choosing k (ksa ptr).
    #[arg(long)]
    pub k_epsilon: Option<f64>,
    /// Failure probability of the propose-test-release step (ksa ptr).
    #[arg(long)]
    pub ptr_delta: Option<f64>,
    /// Stop before any query that would take the ledger past this epsilon.
    /// Defaults to the target epsilon.
    #[arg(long)]
    pub budget: Option<f64>,
    #[arg(long)]
    pub n_subsets: Option<usize>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub subsample_rate: Option<f64>,
    /// Run queries concurrently. Requires a target epsilon.
    #[arg(long)]
    pub parallel_queries: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CalibrateMechanism {
    /// Gaussian mechanism with unit sensitivity; prints its noise multiplier.
    Gaussian,
    /// Report-noisy-max classification; prints the vote noise std.
    Rnm,
    /// Exponential mechanism; prints the per-query epsilon.
    Em,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long, value_enum, default_value = "gaussian")]
    mechanism: CalibrateMechanism,
    #[arg(long)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-5)]
    delta: f64,
    #[arg(long, default_value_t = 1)]
    queries: u64,
    /// Poisson subsampling rate of the exemplar store.
    #[arg(long, default_value_t = 1.0)]
    subsample_rate: f64,
}

/// Errors that decide the process exit code.
#[derive(Debug)]
pub enum Failure {
    Budget(String),
    Backend(String),
    Config(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Budget(m) => write!(f, "budget exhausted: {m}"),
            Failure::Backend(m) => write!(f, "backend failure: {m}"),
            Failure::Config(m) => write!(f, "configuration error: {m}"),
        }
    }
}

impl std::error::Error for Failure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Budget(_) => 2,
                Failure::Backend(_) => 3,
                Failure::Config(_) => 4,
            };
        }
        if let Some(e) = cause.downcast_ref::<AggregationError>() {
            match e {
                AggregationError::Backend(_) | AggregationError::AllSubsetsFailed(_) => return 3,
                AggregationError::Config(_) | AggregationError::Input(_) => return 4,
                _ => {}
            }
        }
        if cause.downcast_ref::<BackendError>().is_some() {
            return 3;
        }
        if let Some(AccountingError::Parse { .. }) = cause.downcast_ref::<AccountingError>() {
            return 4;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(4) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let global = run::Global {
        config: cli.config,
        backend: cli.backend,
        seed: cli.seed,
        endpoint_url: cli.endpoint_url,
        privacy_off_debug: cli.privacy_off_debug,
    };
    match cli.command {
        Command::Classify(args) => run::pipeline(&global, run::TaskKind::Classify, &args),
        Command::Esa(args) => run::pipeline(&global, run::TaskKind::Esa, &args),
        Command::Ksa { args, method } => run::pipeline(&global, run::TaskKind::Ksa(method), &args),
        Command::Calibrate(a) => {
            let mechanism = match a.mechanism {
                CalibrateMechanism::Gaussian => run::Calibration::Gaussian,
                CalibrateMechanism::Rnm => run::Calibration::Rnm,
                CalibrateMechanism::Em => run::Calibration::Em,
            };
            run::calibrate(mechanism, a.epsilon, a.delta, a.queries, a.subsample_rate)
        }
        Command::Account { ledger, delta } => run::account(&ledger, delta),
        Command::Score { predictions, references, output } => run::score(&predictions, &references, output.as_deref()),
    }
}
