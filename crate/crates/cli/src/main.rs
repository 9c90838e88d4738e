//! `hybridst` command-line driver. Each subcommand runs one stage and talks
//! to the next only through files.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hybridst::hybrid::Variant;
use hybridst::preprocess::Split;

#[derive(Parser)]
#[command(name = "hybridst", version, about = "Spatiotemporal traffic forecasting pipeline")]
struct Cli {
    /// Worker threads; falls back to HYBRIDST_THREADS, then all cores.
    /// Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic corpus.
    Synth(SynthArgs),
    /// Clean, impute, normalize and window a panel.
    Preprocess(PreprocessArgs),
    /// Build a sensor graph from distances or correlations.
    Graph(GraphArgs),
    /// Train the deep model (stage 1).
    Train(TrainArgs),
    /// Fit the residual ensemble and α (stage 2).
    TrainEnsemble(EnsembleArgs),
    /// Write forecasts for one split as CSV.
    Predict(PredictArgs),
    /// Score models and baselines on one split.
    Evaluate(EvaluateArgs),
    /// Finite-difference check of every gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed from --config.
    #[arg(long)]
    seed: Option<u64>,
    /// Generator settings as JSON; defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Bin,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    panel: PathBuf,
    /// Guessed from the extension when omitted.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Cleaning summary as JSON.
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args)]
struct GraphArgs {
    #[arg(long)]
    panel: PathBuf,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    #[arg(long)]
    config: PathBuf,
    /// Pairwise road distances, needed for distance graphs.
    #[arg(long)]
    distances: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Hybridst,
    GcnOnly,
    TransformerOnly,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Hybridst => Variant::Hybrid,
            VariantArg::GcnOnly => Variant::GcnOnly,
            VariantArg::TransformerOnly => Variant::TransformerOnly,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    windows: PathBuf,
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Overrides model.variant from the config.
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch history as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EnsembleArgs {
    #[arg(long)]
    windows: PathBuf,
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Exogenous table; without it rows hold calendar features only.
    #[arg(long)]
    exog: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    windows: PathBuf,
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    exog: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    windows: PathBuf,
    #[arg(long)]
    graph: PathBuf,
    /// Main model; reported as `hybridst`, plus `hybridst_dl` when it
    /// carries an ensemble.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Extra checkpoints, reported under their variant names.
    #[arg(long)]
    ablation: Vec<PathBuf>,
    #[arg(long)]
    exog: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value = "persistence")]
    reference: String,
    #[arg(long, default_value = "synthetic")]
    dataset: String,
    #[arg(long)]
    out: PathBuf,
    /// Aligned text table.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Long-format CSV for plotting.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Results as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, String> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var("HYBRIDST_THREADS") {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| format!("HYBRIDST_THREADS must be a positive integer, got {v:?}")),
        _ => Ok(None),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match thread_count(cli.threads) {
        Ok(Some(0)) => {
            eprintln!("error: thread count must be at least 1");
            return ExitCode::from(1);
        }
        Ok(Some(n)) => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                eprintln!("error: could not start {n} worker threads: {e}");
                return ExitCode::from(1);
            }
        }
        Ok(None) => {}
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    }

    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Preprocess(a) => commands::preprocess(a),
        Command::Graph(a) => commands::graph(a),
        Command::Train(a) => commands::train(a),
        Command::TrainEnsemble(a) => commands::train_ensemble(a),
        Command::Predict(a) => commands::predict(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
