mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "mx", version, about = "Minifloat and MX block floating point experiments")]
struct Cli {
    /// Worker threads for matrix products (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the properties of a number format.
    Inspect {
        /// Format id, e.g. e4m3, e5m2, e3m4, e5m10, e8m7.
        #[arg(long = "format", value_name = "FORMAT")]
        format: Option<String>,
        #[arg(value_name = "FORMAT", conflicts_with = "format")]
        positional: Option<String>,
    },
    /// Quantize a file of numbers to MX and report per-block errors.
    Quantize(QuantizeArgs),
    /// Time MX dot products and measure their error.
    BenchDot(BenchArgs),
    /// Train with truncation and with round-to-nearest and compare losses.
    CompareRounding(TrainArgs),
    /// Fine-tune the toy model and write its loss curve.
    Train(TrainArgs),
    /// Sample text from a checkpoint.
    Generate(GenerateArgs),
    /// List the precision presets.
    Presets,
}

#[derive(Debug, Args)]
struct QuantizeArgs {
    /// Whitespace or comma separated numbers.
    input: PathBuf,
    #[arg(long, default_value = "e4m3")]
    format: String,
    #[arg(long, default_value_t = 32)]
    block: usize,
    #[arg(long, default_value = "nearest-away")]
    rounding: String,
    /// CSV report path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Vector length.
    #[arg(long, default_value_t = 256)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    block: usize,
    #[arg(long, default_value = "e4m3")]
    format: String,
    #[arg(long, default_value = "wide")]
    acc: String,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fill every element with the largest finite value of one sign.
    #[arg(long)]
    adversarial: bool,
    /// Per-trial CSV (default: none).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, default_value = "baseline")]
    preset: String,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Training text (default: built-in sonnets).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Replace the element format of the preset's MX containers.
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    acc: Option<String>,
    #[arg(long)]
    rounding: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 32)]
    seq_len: usize,
    /// CSV path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the trained weights here.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Precision used for inference.
    #[arg(long, default_value = "baseline")]
    preset: String,
    #[arg(long, default_value = "Shall I compare thee")]
    prompt: String,
    /// Prompt as comma-separated token ids instead of text.
    #[arg(long, conflicts_with = "prompt")]
    tokens: Option<String>,
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 0.8)]
    temperature: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    acc: Option<String>,
    #[arg(long)]
    rounding: Option<String>,
    /// Write the generated token ids here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let args: Vec<String> = std::env::args().skip(1).collect();
    let result = match cli.command {
        Command::Inspect { format, positional } => commands::inspect(format.or(positional)),
        Command::Quantize(a) => commands::quantize(&a, &args),
        Command::BenchDot(a) => commands::bench_dot(&a, &args),
        Command::CompareRounding(a) => commands::compare_rounding(&a, &args),
        Command::Train(a) => commands::train(&a, &args),
        Command::Generate(a) => commands::generate(&a, &args),
        Command::Presets => commands::presets(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) if f.is_broken_pipe() => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
