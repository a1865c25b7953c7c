use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use mtrl::envs::{gridworld_suite, MdpFamily};
use mtrl::harness::{run_experiment, summary_text, ArmSelection, ExperimentConfig};
use mtrl::mdp::{value_iteration, Mdp};

#[derive(Parser)]
#[command(name = "mtrl", version, about = "Multi-task reinforcement learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write CSV results.
    Run {
        /// Flat `key = value` config file; defaults to the gridworld setup.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        rounds: Option<usize>,
        /// multitask, single_task_e3 or both.
        #[arg(long)]
        arm: Option<ArmSelection>,
        /// Parallel rounds (0 = all cores).
        #[arg(long)]
        workers: Option<usize>,
        /// Print per-round progress.
        #[arg(short, long)]
        verbose: bool,
    },
    /// Write the gridworld family in the text format.
    Gridworld {
        #[arg(long, default_value_t = 0.95)]
        discount: f64,
        /// Output file; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve an MDP or every member of a family and print values and policy.
    Plan {
        /// MDP or family file.
        path: PathBuf,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            config,
            out,
            seed,
            rounds,
            arm,
            workers,
            verbose,
        } => {
            let mut cfg = match &config {
                Some(path) => ExperimentConfig::from_file(path)?,
                None => ExperimentConfig::default(),
            };
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(rounds) = rounds {
                cfg.rounds = rounds;
            }
            if let Some(arm) = arm {
                cfg.arm = arm;
            }
            if let Some(workers) = workers {
                cfg.workers = workers;
            }
            cfg.verbose |= verbose;
            let stats = run_experiment(&cfg)?;
            print!("{}", summary_text(&cfg, &stats));
        }
        Command::Gridworld { discount, out } => {
            let text = gridworld_suite(discount)?.to_string();
            match out {
                Some(path) => fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{text}"),
            }
        }
        Command::Plan { path, tol } => {
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let mdps: Vec<Mdp> = if text.trim_start().starts_with("family") {
                let family: MdpFamily = text.parse()?;
                family.members().cloned().collect()
            } else {
                vec![text.parse()?]
            };
            for (i, mdp) in mdps.iter().enumerate() {
                let (values, policy) = value_iteration(mdp, tol);
                println!("mdp {i}");
                for (s, (v, a)) in values.0.iter().zip(&policy.0).enumerate() {
                    println!("{s:>4} {v:>12.6} {a}");
                }
            }
        }
    }
    Ok(())
}
