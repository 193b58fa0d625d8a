use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gca_cli::commands::{cmd_attn_export, cmd_eval, cmd_gradcheck, cmd_synth, cmd_train};
use gca_cli::{CliError, RunConfig};
use gca_core::Variant;

/// Attention LSTM for skeleton action recognition.
///
/// Exit codes: 0 success, 2 configuration, 3 I/O, 4 training divergence,
/// 5 gradient check failure, 6 data or checkpoint content, 1 other.
#[derive(Debug, Parser)]
#[command(name = "gca", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a configuration key, e.g. `--set train.learning_rate=1e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// gca, two_stream, baseline_global_1 or baseline_global_2.
    #[arg(long, global = true)]
    variant: Option<String>,

    /// Model and training seed (the dataset uses `synthetic.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    /// Directory written by `synth`.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,

    /// Checkpoint path; defaults to `<output-dir>/model.ckpt`.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset into the output directory.
    Synth,
    /// Train on the data directory; writes model.ckpt, report.jsonl, timing.jsonl.
    Train,
    /// Evaluate a checkpoint; writes metrics.json.
    Eval {
        /// Comma-separated noise levels (meters) for the robustness sweep.
        #[arg(long, value_delimiter = ',')]
        noise_sigmas: Option<Vec<f64>>,
    },
    /// Finite-difference gradient check on small toy models.
    Gradcheck {
        /// Corrupt one analytic gradient; the check must then fail.
        #[arg(long)]
        inject_grad_bug: bool,
    },
    /// Dump attention maps of a checkpoint as TSV grids.
    AttnExport,
}

fn load(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(v) = &cli.variant {
        cfg.variant = v.parse::<Variant>().map_err(CliError::config)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(p) = &cli.output_dir {
        cfg.output_dir = p.clone();
    }
    if let Some(p) = &cli.data_dir {
        cfg.data_dir = p.clone();
    }
    if let Some(p) = &cli.checkpoint {
        cfg.checkpoint = Some(p.clone());
    }
    match &cli.command {
        Command::Eval {
            noise_sigmas: Some(s),
        } => cfg.eval.noise_sigmas = s.clone(),
        Command::Gradcheck { inject_grad_bug: true } => cfg.gradcheck.inject_grad_bug = true,
        _ => {}
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<String, CliError> {
    let cfg = load(cli)?;
    match cli.command {
        Command::Synth => cmd_synth(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Eval { .. } => cmd_eval(&cfg),
        Command::Gradcheck { .. } => cmd_gradcheck(&cfg),
        Command::AttnExport => cmd_attn_export(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
