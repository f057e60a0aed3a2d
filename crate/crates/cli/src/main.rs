use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use opg_cli::{
    cmd_evaluate, cmd_grad_check, cmd_render, cmd_replay, cmd_train, resolve_config, EvalArgs,
    TrainArgs,
};

#[derive(Parser, Debug)]
#[command(
    name = "opg",
    version,
    about = "Occlusion-aware push/grasp training and evaluation"
)]
struct Cli {
    /// JSON config; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the Q-net and coordinator through the curriculum.
    Train {
        #[arg(long)]
        max_iter: u64,
        #[arg(long)]
        out_dir: PathBuf,
        /// Continue from a checkpoint; its stored config is used.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run evaluation protocols against a frozen checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON protocol object or list of them.
        #[arg(long)]
        protocols: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Choose push or grasp by the larger best Q value instead of the coordinator.
        #[arg(long)]
        no_coordinator: bool,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Re-execute a trial log on its logged scene and check for drift.
    Replay {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write the color, depth and amodal rasters of a scene.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        target: u32,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compare analytic and finite-difference gradients.
    GradCheck {
        #[arg(long, default_value_t = 16)]
        width: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            // library errors often embed their source text already
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train {
            max_iter,
            out_dir,
            resume,
        } => {
            let config = resolve_config(cli.config.as_deref(), cli.seed)?;
            let summary = cmd_train(&TrainArgs {
                config,
                max_iter,
                out_dir,
                resume,
            })?;
            for m in &summary.metrics {
                println!(
                    "iter {:>6}  success {:.3}  attempts {:.2}  loss {:.4}",
                    m.iter, m.rolling_success_100, m.rolling_attempts_100, m.mean_loss
                );
            }
            println!(
                "{} iterations, {} checkpoints",
                summary.iterations,
                summary.checkpoints.len() + 1
            );
        }
        Command::Evaluate {
            checkpoint,
            protocols,
            out_dir,
            no_coordinator,
            threads,
        } => {
            let out = cmd_evaluate(&EvalArgs {
                checkpoint,
                protocols,
                out_dir,
                no_coordinator,
                threads,
            })?;
            for l in &out.lines {
                println!(
                    "{:<16} {:<14} {:>4} trials  {:6.2}%  {:.2} attempts",
                    l.label, l.protocol, l.trials, l.success_rate_pct, l.mean_attempts
                );
            }
            println!("wrote {}", out.metrics_csv.display());
        }
        Command::Replay {
            log,
            scene,
            out_dir,
        } => {
            let config = match &cli.config {
                Some(_) => Some(resolve_config(cli.config.as_deref(), cli.seed)?),
                None => None,
            };
            let n = cmd_replay(&log, &scene, &out_dir, config)?;
            println!("replayed {n} motions without drift");
        }
        Command::Render {
            scene,
            target,
            out_dir,
        } => {
            for p in cmd_render(&scene, target, &out_dir)? {
                println!("{}", p.display());
            }
        }
        Command::GradCheck { width } => {
            let seed = resolve_config(cli.config.as_deref(), cli.seed)?.seed;
            let mut ok = true;
            for (name, report, tol) in cmd_grad_check(seed, width)? {
                let pass = report.passes(tol);
                ok &= pass;
                println!(
                    "{} {name}: max rel error {:.3e} over {} parameters (tol {tol:e})",
                    if pass { "PASS" } else { "FAIL" },
                    report.max_rel_error,
                    report.checked
                );
            }
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
