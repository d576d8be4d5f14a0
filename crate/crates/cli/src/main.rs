use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use irene_core::export::GraphMethod;
use irene_core::metrics::Task;
use irene_core::selfcheck::{self, Scope};

mod commands;

/// Dynamic graph learning and masked graph autoencoding for multichannel
/// recordings.
#[derive(Debug, Parser)]
#[command(name = "irene", version, about, propagate_version = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted graphs.
    Synth(SynthArgs),
    /// Self-supervised pretraining; prints one JSON line per epoch.
    Pretrain(PretrainArgs),
    /// Train classification heads on a pretrained checkpoint.
    Finetune(FinetuneArgs),
    /// Score a finetuned model on a labeled dataset.
    Eval(EvalArgs),
    /// Export per-window adjacency and edge density.
    Graphs(GraphsArgs),
    /// Edge density and structure scores of several graph methods.
    CompareGraphs(CompareArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// JSON generator settings; missing fields take their defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed of the settings file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// JSON pipeline configuration; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Write the epoch log here instead of stdout.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Leave the learned per-clip adjacency out of the checkpoint.
    #[arg(long)]
    no_adjacency: bool,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    /// Labeled dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Pretrained checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Output directory for per-seed models, logs and the metric report.
    #[arg(long)]
    out: PathBuf,
    /// Number of independent runs, seeded `seed, seed + 1, ...`.
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    /// First seed; defaults to the training seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Train the feature map and encoder too, not only the head.
    #[arg(long)]
    unfreeze: bool,
    #[arg(long, value_enum, default_value_t = TaskArg::Detect)]
    task: TaskArg,
    /// Held-out dataset for the report; without it the validation split
    /// (also used for early stopping) is scored.
    #[arg(long)]
    test: Option<PathBuf>,
    /// JSON training configuration overriding the checkpoint's.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Finetuned model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Defaults to the task the model was trained for.
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    /// Directory receiving `metrics.json` and `confusion.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GraphsArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint whose graphs are exported (method `ib`).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// JSON pipeline configuration for the label-free methods.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory: `adjacency/clip_NNNN.json` and `density.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated methods.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "ridge,distance,xcorr,temporal"
    )]
    methods: Vec<MethodArg>,
    /// Checkpoint for the `ib` method.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = ScopeArg::Loss)]
    scope: ScopeArg,
    /// Finite-difference step.
    #[arg(long, default_value_t = selfcheck::DEFAULT_EPS)]
    eps: f64,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum TaskArg {
    Detect,
    Classify,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Detect => Task::Detect,
            TaskArg::Classify => Task::Classify,
        }
    }
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum MethodArg {
    Ib,
    Ridge,
    Distance,
    Xcorr,
    Temporal,
}

impl From<MethodArg> for GraphMethod {
    fn from(m: MethodArg) -> GraphMethod {
        match m {
            MethodArg::Ib => GraphMethod::Ib,
            MethodArg::Ridge => GraphMethod::Ridge,
            MethodArg::Distance => GraphMethod::Distance,
            MethodArg::Xcorr => GraphMethod::Xcorr,
            MethodArg::Temporal => GraphMethod::Temporal,
        }
    }
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum ScopeArg {
    Op,
    Loss,
    Model,
}

impl From<ScopeArg> for Scope {
    fn from(s: ScopeArg) -> Scope {
        match s {
            ScopeArg::Op => Scope::Op,
            ScopeArg::Loss => Scope::Loss,
            ScopeArg::Model => Scope::Model,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("IRENE_LOG", "warn")).init();
    // clap exits with 2 on usage errors and 0 for --help / --version
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Eval(a) => commands::eval(a),
        Command::Graphs(a) => commands::graphs(a),
        Command::CompareGraphs(a) => commands::compare_graphs(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("irene: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
