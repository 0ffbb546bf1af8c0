//! Command-line front end: train, predict, eval, synth, experiment and
//! export-tree.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
//! failure.

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod config;
pub mod model;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numerical(String),
    /// Standard output was closed by the reader (e.g. `| head`).
    ClosedOutput,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::ClosedOutput => 0,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::ClosedOutput => f.write_str("output closed"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<coalmtl::Error> for CliError {
    fn from(e: coalmtl::Error) -> Self {
        use coalmtl::Error as E;
        if let E::Io(io) = &e {
            if io.kind() == std::io::ErrorKind::BrokenPipe {
                return CliError::ClosedOutput;
            }
        }
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else if e.is_data() || matches!(e, E::Dimension { .. } | E::InvalidTree(_)) {
            CliError::Data(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            return CliError::ClosedOutput;
        }
        CliError::Data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "coalmtl", version, about = "Multitask learning and domain adaptation with a latent coalescent tree over tasks")]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "COALMTL_THREADS")]
    pub threads: Option<usize>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model and write model.json, trace.csv, tree.nwk and tree.dot.
    Train(TrainArgs),
    /// Write per-example predictions for a corpus.
    Predict(PredictArgs),
    /// Score a fitted model on a corpus, per task and macro-averaged.
    Eval(EvalArgs),
    /// Sample a synthetic corpus and its ground truth.
    Synth(SynthArgs),
    /// Run an experiment driver and write a CSV report.
    Experiment(ExperimentArgs),
    /// Write the fitted tree of a model as Newick or DOT.
    ExportTree(ExportTreeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Da,
    Mtl,
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        <ModelKind as ValueEnum>::from_str(s, true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LabelKind {
    Classification,
    Regression,
}

impl std::str::FromStr for LabelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        <LabelKind as ValueEnum>::from_str(s, true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TreeFormat {
    Newick,
    Dot,
}

/// Hyperparameters shared by `train` and `experiment`; unset values fall back
/// to the config file and then to the defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct FitArgs {
    /// `key = value` file with defaults for any of these options.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Prior variance σ² at the root and of the baselines' weights [default: 1].
    #[arg(long)]
    pub sigma2: Option<f64>,
    /// Regression noise variance ρ² [default: 1].
    #[arg(long)]
    pub rho2: Option<f64>,
    /// EM iterations [default: 20].
    #[arg(long)]
    pub iters: Option<usize>,
    /// Fraction of each task held out to pick the EM iteration [default: 0.1].
    #[arg(long)]
    pub heldout: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// 1-based discrete input columns for the +x variants, comma separated.
    #[arg(long)]
    pub discrete: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// da or mtl [default: da].
    #[arg(long)]
    pub model: Option<ModelKind>,
    /// da: diag, full, diag+x, full+x, data; mtl: diag, full [default: full for da, diag for mtl].
    #[arg(long)]
    pub variant: Option<String>,
    /// Output directory.
    #[arg(long, short, default_value = ".")]
    pub out: PathBuf,
    #[command(flatten)]
    pub fit: FitArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// model.json written by `train`.
    #[arg(long = "model")]
    pub model_path: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// CSV output (standard output when absent).
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long = "model")]
    pub model_path: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// accuracy, auc or r2 [default: accuracy for classification, r2 for regression].
    #[arg(long)]
    pub metric: Option<String>,
    /// Also write the report as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "da")]
    pub model: ModelKind,
    #[arg(long, short = 'k')]
    pub tasks: usize,
    #[arg(long, short = 'd')]
    pub dim: usize,
    /// Examples per task.
    #[arg(long, short = 'n')]
    pub examples: usize,
    #[arg(long, value_enum, default_value = "classification")]
    pub labels: LabelKind,
    #[arg(long, default_value_t = 1.0)]
    pub sigma2: f64,
    #[arg(long, default_value_t = 0.1)]
    pub rho2: f64,
    /// Standard deviation of per-task input mean shifts (da only).
    #[arg(long, default_value_t = 0.0)]
    pub input_shift: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Corpus output path.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Ground-truth sidecar [default: <out>.truth].
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[command(subcommand)]
    pub kind: ExperimentKind,
}

#[derive(Debug, Args)]
pub struct ExperimentCommon {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Comma-separated methods, e.g. indp,pool,feda,coal-full,mtl-diag.
    #[arg(long, default_value = "indp,pool,feda,coal-full")]
    pub methods: String,
    /// Comma-separated split seeds.
    #[arg(long, default_value = "0")]
    pub seeds: String,
    /// Fraction of each task kept for testing.
    #[arg(long, default_value_t = 0.5)]
    pub test_fraction: f64,
    /// Project inputs to this many principal components (fitted on training data).
    #[arg(long)]
    pub pca: Option<usize>,
    #[arg(long)]
    pub metric: Option<String>,
    /// CSV report (standard output when absent).
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Held-out likelihood traces as CSV.
    #[arg(long)]
    pub traces: Option<PathBuf>,
    #[command(flatten)]
    pub fit: FitArgs,
}

#[derive(Debug, Subcommand)]
pub enum ExperimentKind {
    /// Learning curves over per-task training sizes.
    Curve {
        #[command(flatten)]
        common: ExperimentCommon,
        /// Comma-separated per-task training sizes.
        #[arg(long)]
        sizes: String,
    },
    /// Transfer to one target task with a fixed amount of source data.
    Target {
        #[command(flatten)]
        common: ExperimentCommon,
        /// Target task name.
        #[arg(long)]
        target: String,
        #[arg(long)]
        source_size: usize,
        /// Comma-separated target training sizes.
        #[arg(long)]
        target_sizes: String,
    },
    /// Append a column-scrambled copy of one task and sweep the scrambled fraction.
    Scramble {
        #[command(flatten)]
        common: ExperimentCommon,
        /// Task to copy.
        #[arg(long)]
        task: String,
        /// Comma-separated scrambled fractions.
        #[arg(long, default_value = "0,0.25,0.5,0.75,1")]
        fractions: String,
        /// Per-task training size cap.
        #[arg(long)]
        size: Option<usize>,
    },
}

#[derive(Debug, Args)]
pub struct ExportTreeArgs {
    #[arg(long = "model")]
    pub model_path: PathBuf,
    #[arg(long, value_enum, default_value = "newick")]
    pub format: TreeFormat,
    /// Output file (standard output when absent).
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

/// Parses `args`, runs the command and returns the process exit code.
/// Argument errors map to exit code 1.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_env("COALMTL_LOG").try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(CliError::ClosedOutput) => 0,
        Err(e) => {
            eprintln!("coalmtl: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.threads {
        Some(0) => Err(CliError::Config("--threads must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(|e| CliError::Config(e.to_string()))?;
            pool.install(|| commands::dispatch(cli.command))
        }
        None => commands::dispatch(cli.command),
    }
}
