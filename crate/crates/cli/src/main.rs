//! `guide`: dataset synthesis, clustering, training, evaluation, LODO sweeps
//! and metric probes from the command line.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 I/O error,
//! 4 numerical failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "guide", version, about = "Pseudo-domain discovery and domain-adaptive classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Args, Clone)]
pub struct Common {
    /// Machine-readable JSON on stdout instead of human output.
    #[arg(long, global = true)]
    pub json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (inputs.gft, psi.gft, meta.csv).
    Synth(SynthArgs),
    /// Cluster a psi matrix with k-means.
    Cluster(ClusterArgs),
    /// Train an ERM or GUIDE model and write a bundle plus its loss history.
    Train(TrainArgs),
    /// Score a bundle on the test or train split of a dataset.
    Eval(EvalArgs),
    /// Leave-one-domain-out sweep.
    Lodo(SweepArgs),
    /// Transformation ablation: ERM, concat, replace, linear, rbf.
    Ablate(SweepArgs),
    /// Normalized mutual information between two label files.
    Nmi(NmiArgs),
    /// Domain-predictability probe on a feature matrix.
    Probe(ProbeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
pub enum DtypeArg {
    F32,
    F64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Test,
    Train,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Spec file of `key = value` lines (`profile = benchmark-v1` selects a base profile).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Override a spec key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "f64")]
    pub dtype: DtypeArg,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args)]
pub struct ClusterArgs {
    #[arg(long)]
    pub psi: PathBuf,
    #[arg(long)]
    pub k: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write `row,label` assignments as CSV.
    #[arg(long)]
    pub assignments: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub restarts: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Cluster model fit on the training split's psi (GUIDE with centroids).
    #[arg(long)]
    pub clusters: Option<PathBuf>,
    /// Cluster the training split here with this many clusters instead of loading --clusters.
    #[arg(long, conflicts_with = "clusters")]
    pub k: Option<usize>,
    /// erm | guide
    #[arg(long)]
    pub mode: Option<String>,
    /// rbf | linear | replace | concat | noclustering
    #[arg(long)]
    pub variant: Option<String>,
    /// Training config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Leave this domain out of training (recorded in the bundle).
    #[arg(long)]
    pub held_out: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss history CSV; defaults to `<out>.history.csv`.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args)]
pub struct SweepArgs {
    /// Experiment config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Trial seeds, comma-separated; overrides `seeds` in the config.
    #[arg(long, value_delimiter = ',')]
    pub seed: Vec<u64>,
    /// Maximum concurrent cells (0 = all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out_report: PathBuf,
    /// csv | json; inferred from the report extension when absent.
    #[arg(long)]
    pub format: Option<String>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args)]
pub struct NmiArgs {
    #[arg(long)]
    pub labels_a: PathBuf,
    #[arg(long)]
    pub labels_b: PathBuf,
    /// Column to read from file A (default: `label`, or the only column).
    #[arg(long)]
    pub column_a: Option<String>,
    #[arg(long)]
    pub column_b: Option<String>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub features: PathBuf,
    /// Meta CSV supplying the domain labels.
    #[arg(long)]
    pub meta: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub splits: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Cluster(a) => commands::cluster(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Lodo(a) => commands::sweep(a, false),
        Command::Ablate(a) => commands::sweep(a, true),
        Command::Nmi(a) => commands::nmi(a),
        Command::Probe(a) => commands::probe(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
