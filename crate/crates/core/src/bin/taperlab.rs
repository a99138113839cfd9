//! Command-line front end for the experiment runner.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use taperlab::experiment::{
    run_eval, run_experiment, run_generate, run_sweep_proportion, run_train, ExperimentConfig,
};
use taperlab::{Error, MethodKind, Result};

#[derive(Parser)]
#[command(name = "taperlab", version, about = "Truncated off-policy REINFORCE experiments on synthetic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Runs only this method (sft, naive, opr, tis, topr, ppo, dpo).
    #[arg(long)]
    method: Option<MethodKind>,
    /// Reward baseline applied to every method.
    #[arg(long, allow_hyphen_values = true)]
    baseline: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a candidate dataset from the base policy.
    Generate(Common),
    /// Train one iteration of the first method.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset written by `generate`; sampled afresh when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the multi-iteration schedule for the first method.
    Iterate(Common),
    /// Evaluate the base policy or a saved policy.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Policy JSON written by `train` or `iterate`.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Run every configured method and merge their outputs.
    Compare(Common),
    /// Train one iteration per target effective positive proportion.
    SweepProportion(Common),
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_overrides(common.seed, common.method, common.baseline)?;
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))?;
    Ok((cfg, out))
}

fn first_only(mut cfg: ExperimentConfig) -> ExperimentConfig {
    cfg.methods.truncate(1);
    cfg
}

fn report(out: &Path, what: &str) {
    println!("{what} written to {}", out.display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(common) => {
            let (cfg, out) = load(&common)?;
            let data = run_generate(&cfg, &out)?;
            println!("{} trajectories, positive fraction {:.4}", data.len(), data.p_actual());
            report(&out, "dataset");
        }
        Command::Train { common, data } => {
            let (cfg, out) = load(&common)?;
            let (_, log) = run_train(&cfg, &out, data.as_deref())?;
            if let Some(r) = log.last_probe() {
                println!("{} steps, expected reward {r:.4}", log.len());
            }
            report(&out, "policy and training log");
        }
        Command::Iterate(common) => {
            let (cfg, out) = load(&common)?;
            let runs = run_experiment(&first_only(cfg), &out)?;
            for s in &runs[0].summaries {
                println!("iteration {}: expected reward {:.4}", s.iteration, s.expected_reward);
            }
            report(&out, "iteration artifacts");
        }
        Command::Eval { common, policy } => {
            let (cfg, out) = load(&common)?;
            let r = run_eval(&cfg, &out, policy.as_deref())?;
            println!("pass@1 {:.4}, invalid rate {:.4}", r.pass_at_1, r.invalid_rate);
            for m in &r.majority {
                println!("maj@{} {:.4} ± {:.4}", m.k, m.mean, 2.0 * m.se);
            }
            report(&out, "evaluation tables");
        }
        Command::Compare(common) => {
            let (cfg, out) = load(&common)?;
            for run in run_experiment(&cfg, &out)? {
                let last = run.summaries.last().expect("iteration 0 is always present");
                println!("{}: expected reward {:.4}", run.label, last.expected_reward);
            }
            report(&out, "comparison");
        }
        Command::SweepProportion(common) => {
            let (cfg, out) = load(&common)?;
            for p in run_sweep_proportion(&cfg, &out)? {
                println!(
                    "target {:.3} (c = {:+.4}): expected reward {:.4}",
                    p.target, p.baseline, p.expected_reward
                );
            }
            report(&out, "sweep");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("invalid usage");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error[{}]: {message}", e.kind());
            ExitCode::FAILURE
        }
    }
}
