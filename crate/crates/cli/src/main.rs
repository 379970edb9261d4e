use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod run;

use commands::{EvalArgs, SweepArgs};

/// Environment variable that overrides `output.root`.
pub const OUTPUT_ROOT_ENV: &str = "PROMIM_OUTPUT_ROOT";

#[derive(Parser, Debug)]
#[command(
    name = "promim",
    version,
    about = "Prompt-tuning experiments on a tiny vision-language dual encoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every run command.
#[derive(Args, Clone, Debug)]
pub struct Common {
    /// JSON config file. Unknown keys are rejected.
    #[arg(long, short)]
    pub config: Option<PathBuf>,

    /// Override one config value, e.g. `--set tune.lambda=4`. Repeatable;
    /// later values win.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Re-run the command recorded in a manifest and check that metrics.csv
    /// comes out byte-identical.
    #[arg(long, value_name = "MANIFEST", conflicts_with_all = ["config", "overrides"])]
    pub replay: Option<PathBuf>,

    /// Also print per-family results and the family-mean H.
    #[arg(long, short)]
    pub verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain the dual encoder, cache it and score zero-shot prompts.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Base-to-new tuning over every family and seed.
    Tune {
        #[command(flatten)]
        common: Common,
    },
    /// Zero-shot, cross-dataset or domain-shift evaluation, or scoring of a saved prompt checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: EvalArgs,
    },
    /// Base-to-new runs over a grid of one config value, or the four-cell ablation.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: SweepArgs,
    },
    /// Summarize every run manifest under the output root.
    Report {
        /// Directory holding `<run-id>/manifest.json` entries.
        #[arg(long, env = OUTPUT_ROOT_ENV, default_value = "runs")]
        root: PathBuf,
        /// Where to write summary.csv and summary.svg; `<root>/report` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Pretrain { common } => commands::pretrain(&common),
        Command::Tune { common } => commands::tune(&common),
        Command::Eval { common, args } => commands::eval(&common, &args),
        Command::Sweep { common, args } => commands::sweep(&common, &args),
        Command::Report { root, out } => commands::report(&root, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, module) = match e.downcast_ref::<promim::Error>() {
                Some(promim::Error::Config(_)) => (2, "config"),
                Some(err) => (1, err.module()),
                None => (1, "cli"),
            };
            eprintln!("error [{module}]: {e:#}");
            ExitCode::from(code)
        }
    }
}
