mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use compact_core::corpus::Vocabulary;
use compact_core::model::CHECKPOINT_VERSION;
use serde_json::json;

use commands::{Ctx, Inputs};

#[derive(Parser)]
#[command(name = "compact", version, about = "Multi-teacher chain-of-thought distillation on a toy student")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run config; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dot-path override, e.g. `--set trainer.epochs=4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Reference model for pca-shift; defaults to the config's initialization.
    #[arg(long, global = true)]
    baseline: Option<PathBuf>,
    #[arg(long, global = true)]
    ledger: Option<PathBuf>,
    #[arg(long, global = true)]
    instance: Option<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    GenData,
    Train,
    Eval,
    GradCheck,
    PcaShift,
    MiTrace,
    WeightsPlot,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::GradCheck => "grad-check",
            Command::PcaShift => "pca-shift",
            Command::MiTrace => "mi-trace",
            Command::WeightsPlot => "weights-plot",
        }
    }
}

fn init_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("COMPACT_THREADS") else { return Ok(()) };
    let n: usize = raw.parse().ok().filter(|&n| n > 0).ok_or_else(|| format!("COMPACT_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let config = match config::resolve(cli.config.as_deref(), &cli.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if let Err(e) = std::fs::create_dir_all(&cli.out) {
        eprintln!("error: creating {}: {e}", cli.out.display());
        return ExitCode::from(2);
    }
    let inputs = Inputs { checkpoint: cli.checkpoint, baseline: cli.baseline, ledger: cli.ledger, instance: cli.instance };
    let mut ctx = Ctx { config: &config, inputs: &inputs, out: &cli.out, vocab: Vocabulary::standard(), outputs: Vec::new() };
    let result = match cli.command {
        Command::GenData => commands::gen_data(&mut ctx),
        Command::Train => commands::train_cmd(&mut ctx),
        Command::Eval => commands::eval_cmd(&mut ctx),
        Command::GradCheck => commands::grad_check(&mut ctx),
        Command::PcaShift => commands::pca_shift_cmd(&mut ctx),
        Command::MiTrace => commands::mi_trace(&mut ctx),
        Command::WeightsPlot => commands::weights_plot(&mut ctx),
    };
    let manifest = json!({
        "subcommand": cli.command.name(),
        "status": if result.is_ok() { "ok" } else { "failed" },
        "config_sha256": config.sha256(),
        "seed": config.seed,
        "versions": { "compact": env!("CARGO_PKG_VERSION"), "checkpoint_format": CHECKPOINT_VERSION },
        "inputs": inputs,
        "outputs": ctx.outputs,
        "config": config.to_value(),
    });
    let manifest_path = cli.out.join("run_manifest.json");
    if let Err(e) = std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n") {
        eprintln!("error: writing {}: {e}", manifest_path.display());
        return ExitCode::from(2);
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
