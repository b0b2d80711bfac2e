use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use a2m::harness::{run_ablation, run_bench, run_eval, run_train, ExperimentConfig};
use a2m::{Error, Result};

/// Few-shot meta-learning experiments.
#[derive(Parser)]
#[command(name = "a2m", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train a model and write a checkpoint.
    Train(Common),
    /// Evaluate a checkpoint and append a row to the results file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate every component subset of the ensemble.
    Ablate(Common),
    /// Time meta-training and meta-testing per episode.
    Bench(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the command's output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let mut cfg = c.load()?;
            if let Some(o) = c.out {
                cfg.checkpoint_path = o;
            }
            let (_, report) = run_train(&cfg)?;
            for line in &report.log {
                println!("{line}");
            }
            println!("checkpoint written to {}", cfg.checkpoint_path.display());
        }
        Command::Eval { checkpoint, common } => {
            let mut cfg = common.load()?;
            if let Some(o) = common.out {
                cfg.results_path = o;
            }
            let r = run_eval(&checkpoint, &cfg)?;
            println!("{}", r.summary());
        }
        Command::Ablate(c) => {
            let mut cfg = c.load()?;
            if let Some(o) = c.out {
                cfg.results_path = o;
            }
            for r in run_ablation(&cfg)? {
                println!("{}", r.summary());
            }
        }
        Command::Bench(c) => {
            let mut cfg = c.load()?;
            if let Some(o) = c.out {
                cfg.bench_path = o;
            }
            let rows = run_bench(&cfg)?;
            let base = rows[0].train_ms_per_ep;
            for r in &rows {
                println!(
                    "{:<14} train {:>9.4} ms/ep ({:.2}x)  eval {:>9.4} ms/ep",
                    r.variant,
                    r.train_ms_per_ep,
                    r.train_ms_per_ep / base,
                    r.eval_ms_per_ep
                );
            }
        }
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(match e {
                Error::Usage(_) => 2,
                _ => 1,
            })
        }
    }
}
