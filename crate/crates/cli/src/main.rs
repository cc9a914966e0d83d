mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

/// Social media popularity pipeline: features, cross-validated models, reports.
#[derive(Debug, Parser)]
#[command(name = "smp", version)]
struct Cli {
    /// TOML file supplying defaults for any flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker thread cap. Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic train/test dataset.
    Synth(SynthArgs),
    /// Fit the feature transform on a dataset and save its state.
    Transform(TransformArgs),
    /// Group k-fold training; writes fold models and median test predictions.
    Train(TrainArgs),
    /// Predict with the fold models written by `train`.
    Predict(PredictArgs),
    /// Weighted average of two prediction files.
    Ensemble(EnsembleArgs),
    /// SRC and MAE of predictions against labels.
    Evaluate(EvaluateArgs),
    /// Per-feature |SRC| against the label.
    Correlate(CorrelateArgs),
    /// Run the pipeline once per block subset.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    n_users: Option<usize>,
}

#[derive(Debug, Args)]
struct TransformArgs {
    #[arg(long)]
    train: Option<PathBuf>,
    /// Comma-separated block tags, or `all`. Defaults to every available block.
    #[arg(long)]
    blocks: Option<String>,
    #[arg(long)]
    state_out: Option<PathBuf>,
    /// Also write the transformed matrix as CSV.
    #[arg(long)]
    features_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Defaults to `<test>/labels.csv` when present.
    #[arg(long)]
    test_labels: Option<PathBuf>,
    /// `gbdt` or `mlp`.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    shuffle_seed: Option<u64>,
    #[arg(long)]
    blocks: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Directory written by `train`.
    #[arg(long)]
    models_dir: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EnsembleArgs {
    #[arg(long)]
    pred_a: Option<PathBuf>,
    #[arg(long)]
    pred_b: Option<PathBuf>,
    /// Weight of `pred-a`.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Also write the scores as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CorrelateArgs {
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    blocks: Option<String>,
    /// Blocks forming the external group. Default `eu`.
    #[arg(long)]
    external: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    test_labels: Option<PathBuf>,
    /// One subset per line, tags separated by `,` or `+`.
    #[arg(long)]
    subsets: Option<PathBuf>,
    /// Comma-separated subset of gbdt, mlp, ensemble. Default `ensemble`.
    #[arg(long)]
    models: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    shuffle_seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Bad or missing command-line input.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(core) = cause.downcast_ref::<smp_core::Error>() {
            return core.kind();
        }
        if cause.is::<UsageError>() {
            return "usage";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "runtime"
}

/// Context chain joined with `: `, skipping causes already quoted by an outer message.
fn render(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if out.contains(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    one_line(&out)
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!(
                "error: usage: {}",
                one_line(first.trim_start_matches("error: "))
            );
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", error_kind(&e), render(&e));
            ExitCode::from(2)
        }
    }
}
