use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use memmamba_cli::commands::MissingCheckpoint;
use memmamba_cli::{run, Action, RunConfig, SweepAxis};

const EXIT_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_CHECKPOINT: u8 = 3;

#[derive(Parser)]
#[command(name = "memmamba", version, about = "Train, evaluate and benchmark MemMamba models")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply to omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set model.tau1=0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and save a checkpoint.
    Train(Common),
    /// Held-out perplexity of a checkpoint at multiples of the training context.
    EvalPpl(Common),
    /// Passkey retrieval accuracy of a checkpoint.
    Passkey(Common),
    /// Token and cross-layer memory fidelity of a checkpoint.
    Fidelity(Common),
    /// Check the analytic bounds on random instances.
    TheoryCheck(Common),
    /// Forward latency against a quadratic attention baseline.
    Bench(Common),
    /// Train one model per value of a config axis and report perplexity.
    Sweep {
        #[arg(long, value_enum)]
        axis: SweepAxis,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (action, common) = match cli.command {
        Cmd::Train(c) => (Action::Train, c),
        Cmd::EvalPpl(c) => (Action::EvalPpl, c),
        Cmd::Passkey(c) => (Action::Passkey, c),
        Cmd::Fidelity(c) => (Action::Fidelity, c),
        Cmd::TheoryCheck(c) => (Action::TheoryCheck, c),
        Cmd::Bench(c) => (Action::Bench, c),
        Cmd::Sweep { axis, common } => (Action::Sweep(axis), common),
    };
    let cfg = match RunConfig::load(common.config.as_deref(), &common.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match run(&action, &cfg) {
        Ok(outputs) => {
            for o in outputs {
                println!("{}", cfg.out_dir.join(o).display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<MissingCheckpoint>() {
                ExitCode::from(EXIT_CHECKPOINT)
            } else {
                ExitCode::from(EXIT_FAILED)
            }
        }
    }
}
