use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pgdag::commands::{self, CliError};
use pgdag::config::Overrides;

/// Typed loss graphs for reinforcement learning: validate, render, evaluate,
/// train and evolve.
///
/// Settings resolve as command-line flags, then the --config JSON file,
/// then per-algorithm defaults. Logging is controlled by LOG_LEVEL.
#[derive(Parser, Debug)]
#[command(name = "pgdag", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Type-check a graph file. Exit 0 if valid, 1 if not, 2 if unreadable.
    Validate { path: PathBuf },
    /// Render a graph file as Graphviz DOT.
    Render {
        path: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a graph's loss on a batch fixture.
    EvalLoss {
        path: PathBuf,
        #[arg(long)]
        fixture: PathBuf,
        /// Seed for noise inputs the fixture does not bind.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one agent and write metrics and weights.
    Train {
        /// Reference algorithm (ddqn, vpg, ppo, ddpg, td3, sac) or graph file.
        spec: Option<String>,
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Run regularized evolution over loss graphs.
    Evolve {
        #[arg(long)]
        iterations: Option<usize>,
        /// Candidate evaluation threads; 0 uses every core.
        #[arg(long)]
        workers: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(clap::Args, Debug)]
struct Common {
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON config layered under the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Validate { path } => commands::validate_cmd(&path),
        Command::Render { path, out } => {
            let (summary, dot) = commands::render_cmd(&path, out.as_deref())?;
            match dot {
                Some(d) => {
                    print!("{d}");
                    eprintln!("{summary}");
                    Ok(String::new())
                }
                None => Ok(summary),
            }
        }
        Command::EvalLoss { path, fixture, seed } => commands::eval_loss_cmd(&path, &fixture, seed),
        Command::Train { spec, env, steps, lr, common } => {
            let flags = Overrides {
                seed: common.seed,
                out: common.out,
                algorithm: spec,
                env,
                steps,
                lr,
                ..Overrides::default()
            };
            let cfg = commands::resolve_config(common.config.as_deref(), &flags, "ddqn")?;
            commands::train_cmd(&cfg)
        }
        Command::Evolve { iterations, workers, common } => {
            let flags = Overrides { seed: common.seed, out: common.out, iterations, workers, ..Overrides::default() };
            let cfg = commands::resolve_config(common.config.as_deref(), &flags, "ddqn")?;
            commands::evolve_cmd(&cfg)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LOG_LEVEL", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            if !summary.is_empty() {
                println!("{summary}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
