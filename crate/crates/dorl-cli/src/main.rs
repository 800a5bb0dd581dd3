//! `dorl` — drives the experiment pipeline:
//! gen-world -> gen-logs -> {train-user-model, build-entropy-index} ->
//! train-policy -> evaluate / sweep, plus analyze-logs and the
//! verify-lemma self-check.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use dorl_core::pipeline::{
    self, load_config, marginalize, rows_to_csv, Baseline, ExperimentConfig, SweepGrid, Workdir,
};
use dorl_core::theory::{random_mdp_pair, random_policy, verify_lemma1};

#[derive(Parser)]
#[command(name = "dorl", version, about = "Model-based offline RL recommendation laboratory")]
struct Cli {
    /// Experiment config (JSON). Required by every subcommand except
    /// verify-lemma.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for artifacts (default: ./out).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Overrides the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Intra-stage parallelism. Stages parallelize only across
    /// independently seeded units, so results match the single-threaded run.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct BaselineArg {
    /// Which method to run.
    #[arg(long, default_value = "dorl")]
    baseline: Baseline,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic ground-truth world (world.json).
    GenWorld,
    /// Sample behavior-policy logs from the world (logs.csv).
    GenLogs,
    /// Train the GPM reward-model ensemble (user_model.json).
    TrainUserModel(BaselineArg),
    /// Build the k-order entropy index from the logs (entropy_index.json).
    BuildEntropyIndex,
    /// Train the baseline's policy on the simulated environment.
    TrainPolicy(BaselineArg),
    /// Evaluate a baseline against the ground-truth environment.
    Evaluate(BaselineArg),
    /// Train and evaluate one policy per grid point (sweep.csv).
    Sweep {
        /// Comma-separated lambda1 values.
        #[arg(long, value_delimiter = ',')]
        lambda1: Vec<f64>,
        /// Comma-separated lambda2 values.
        #[arg(long, value_delimiter = ',')]
        lambda2: Vec<f64>,
        /// Comma-separated quit-window sizes (alternative to the lambda grid).
        #[arg(long, value_delimiter = ',', conflicts_with_all = ["lambda1", "lambda2"])]
        quit_n: Vec<u32>,
        /// Also write a table averaged over this parameter
        /// (sweep_marginal.csv).
        #[arg(long)]
        marginalize: Option<String>,
    },
    /// Dominated categories, repeat rates and day-1 retention of the logs.
    AnalyzeLogs,
    /// Numerically check the mismatch identity on random finite MDP pairs;
    /// exits non-zero if any |lhs - rhs| > 1e-6.
    VerifyLemma {
        /// Number of random instances.
        #[arg(long, default_value_t = 100)]
        instances: u64,
        /// Base seed for instance generation.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn require_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .context("missing --config PATH (required for this subcommand)")?;
    let mut cfg = load_config(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run_verify_lemma(instances: u64, seed: u64) -> anyhow::Result<()> {
    let gammas = [0.5, 0.9, 0.99];
    println!("{:>8} {:>6} {:>14} {:>14} {:>12}", "seed", "gamma", "lhs", "rhs", "diff");
    let mut worst = 0.0f64;
    for i in 0..instances {
        let inst_seed = seed + i;
        let gamma = gammas[(i % 3) as usize];
        let n_states = 2 + (inst_seed % 4) as usize; // 2..=5
        let n_actions = 2 + (inst_seed % 2) as usize; // 2..=3
        let (mdp, mdp_hat) = random_mdp_pair(inst_seed, n_states, n_actions, gamma);
        let pi = random_policy(inst_seed ^ 0x5555, n_states, n_actions);
        let report = verify_lemma1(&mdp, &mdp_hat, &pi)?;
        println!(
            "{:>8} {:>6} {:>14.9} {:>14.9} {:>12.3e}",
            inst_seed, gamma, report.lhs, report.rhs, report.abs_diff
        );
        worst = worst.max(report.abs_diff);
    }
    println!("worst |lhs - rhs| = {worst:.3e} over {instances} instances");
    if worst > 1e-6 {
        bail!("mismatch identity violated: worst diff {worst:.3e} > 1e-6");
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .context("building thread pool")?;
    let out = Workdir::new(&cli.out);

    match &cli.command {
        Command::GenWorld => {
            let cfg = require_config(&cli)?;
            let world = pipeline::run_gen_world(&cfg, &out)?;
            println!(
                "wrote {} ({} users x {} items, {} categories)",
                out.world().display(),
                world.n_users,
                world.n_items,
                world.n_categories
            );
        }
        Command::GenLogs => {
            let cfg = require_config(&cli)?;
            let logs = pipeline::run_gen_logs(&cfg, &out)?;
            println!("wrote {} ({} records)", out.logs().display(), logs.len());
        }
        Command::TrainUserModel(b) => {
            let cfg = require_config(&cli)?;
            let ips = b.baseline.wants_ips_user_model();
            let (ensemble, losses) =
                pool.install(|| pipeline::run_train_user_model(&cfg, &out, ips))?;
            println!(
                "wrote {} (K = {}, final losses {:?})",
                out.user_model(ips).display(),
                ensemble.members.len(),
                losses
            );
        }
        Command::BuildEntropyIndex => {
            let cfg = require_config(&cli)?;
            let index = pipeline::run_build_entropy_index(&cfg, &out)?;
            let pattern_counts: Vec<String> = index
                .orders()
                .iter()
                .map(|&k| format!("k={k}: {}", index.n_patterns(k)))
                .collect();
            println!(
                "wrote {} (patterns {})",
                out.entropy_index().display(),
                pattern_counts.join(", ")
            );
        }
        Command::TrainPolicy(b) => {
            let cfg = require_config(&cli)?;
            pipeline::run_train_policy(&cfg, &out, b.baseline)?;
            println!("wrote {}", out.policy(b.baseline).display());
        }
        Command::Evaluate(b) => {
            let cfg = require_config(&cli)?;
            let summary = pipeline::run_evaluate(&cfg, &out, b.baseline)?;
            println!(
                "{}: R_tra {:.3} +- {:.3} | R_each {:.3} +- {:.3} | length {:.2} +- {:.2} | MCD {:.3}",
                b.baseline,
                summary.r_tra.mean,
                summary.r_tra.std,
                summary.r_each.mean,
                summary.r_each.std,
                summary.length.mean,
                summary.length.std,
                summary.mcd
            );
            println!("wrote {}", out.results(b.baseline).display());
        }
        Command::Sweep {
            lambda1,
            lambda2,
            quit_n,
            marginalize: over,
        } => {
            let cfg = require_config(&cli)?;
            let grid = if !quit_n.is_empty() {
                SweepGrid::QuitWindow {
                    n_values: quit_n.clone(),
                }
            } else if !lambda1.is_empty() && !lambda2.is_empty() {
                SweepGrid::Lambda {
                    lambda1: lambda1.clone(),
                    lambda2: lambda2.clone(),
                }
            } else {
                bail!("sweep needs either --lambda1 and --lambda2, or --quit-n");
            };
            let rows = pool.install(|| pipeline::run_sweep(&cfg, &out, &grid))?;
            println!("wrote {} ({} rows)", out.sweep().display(), rows.len());
            if let Some(over) = over {
                let marginal = marginalize(&rows, over);
                let path = out.dir.join("sweep_marginal.csv");
                std::fs::write(&path, rows_to_csv(&marginal))?;
                println!("wrote {} ({} rows)", path.display(), marginal.len());
            }
        }
        Command::AnalyzeLogs => {
            let cfg = require_config(&cli)?;
            let analysis = pipeline::run_analyze_logs(&cfg, &out)?;
            println!(
                "dominated categories ({}): {:?}",
                analysis.dominated_categories.len(),
                analysis.dominated_categories
            );
            println!(
                "repeat rates: item {:.3}, category {:.3}",
                analysis.mean_item_repeat_rate, analysis.mean_category_repeat_rate
            );
            match &analysis.day1_retention {
                Some(buckets) => {
                    for b in buckets {
                        let upper = b
                            .max_events
                            .map(|e| e.to_string())
                            .unwrap_or_else(|| "inf".into());
                        println!(
                            "retention [{}, {}): {}/{} = {:.3}",
                            b.min_events, upper, b.retained, b.eligible, b.probability
                        );
                    }
                }
                None => println!("retention: logs span fewer than 2 days"),
            }
            println!("wrote {}", out.analysis().display());
        }
        Command::VerifyLemma { instances, seed } => {
            run_verify_lemma(*instances, *seed)?;
        }
    }
    Ok(())
}
