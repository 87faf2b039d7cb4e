use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use dplab::harness::{run_experiment, ExperimentConfig, ExperimentKind, ReportBundle};

#[derive(Parser)]
#[command(name = "dplab", version, about = "Double phase solver and discrete energy-estimate checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve on every ladder level and write field and step-trace files.
    Solve(Common),
    /// Parabolic embedding on seeded random fields.
    VerifyEmbedding(Common),
    /// Energy inequality for truncations of solver outputs.
    VerifyCaccioppoli(Common),
    /// Local sup bound on solver outputs across a sigma sweep.
    VerifySupbound(Common),
    /// Level-set iteration trace on solver outputs.
    DegiorgiTrace(Common),
    /// Refinement study against closed-form solutions.
    Convergence(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration; a built-in preset is used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the configuration).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed (overrides the configuration).
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress the summary on stdout.
    #[arg(long)]
    quiet: bool,
}

impl Command {
    fn split(self) -> (ExperimentKind, Common) {
        match self {
            Command::Solve(c) => (ExperimentKind::Solve, c),
            Command::VerifyEmbedding(c) => (ExperimentKind::Embedding, c),
            Command::VerifyCaccioppoli(c) => (ExperimentKind::Caccioppoli, c),
            Command::VerifySupbound(c) => (ExperimentKind::Supbound, c),
            Command::DegiorgiTrace(c) => (ExperimentKind::Degiorgi, c),
            Command::Convergence(c) => (ExperimentKind::Convergence, c),
        }
    }
}

fn load_config(kind: ExperimentKind, common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => ExperimentConfig::preset(kind),
    };
    if cfg.experiment != kind {
        anyhow::bail!("configuration is for `{}` but the subcommand runs `{}`", cfg.experiment.as_str(), kind.as_str());
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output.dir = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_summary(bundle: &ReportBundle) {
    println!("rows: {}", bundle.reports.len());
    for (k, v) in &bundle.values {
        println!("{k}: {v:.6e}");
    }
    for c in &bundle.checks {
        let status = if c.passed { "ok" } else { "FAILED" };
        let kind = if c.hard { "hard" } else { "soft" };
        println!("[{status}] {} ({kind}) {}", c.name, c.detail);
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, common) = cli.command.split();
    let quiet = common.quiet;
    let result = load_config(kind, &common).and_then(|cfg| Ok(run_experiment(&cfg)?));
    match result {
        Ok(bundle) => {
            if !quiet {
                print_summary(&bundle);
            }
            if bundle.passed() {
                ExitCode::SUCCESS
            } else {
                for c in bundle.failed_checks() {
                    eprintln!("assertion failed: {} {}", c.name, c.detail);
                }
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
