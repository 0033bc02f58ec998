//! nsrlab: train, evaluate, and verify negative-sample reinforcement
//! objectives on tabular policies.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use nsrlab_core::config::ExperimentConfig;
use nsrlab_core::eval::evaluate_policy;
use nsrlab_core::gradcheck::{format_report_table, run_gradcheck_suite, suite_passes};
use nsrlab_core::policy::PolicyTable;
use nsrlab_core::schedule::{effective_ratio, weights, ScheduleKind};
use nsrlab_core::trainer::run_training;

#[derive(Parser)]
#[command(
    name = "nsrlab",
    about = "Negative-sample reinforcement laboratory on tabular policies",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory root; overrides the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override for `training.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress progress output.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run training; writes metrics.csv, policy snapshots, and a
    /// resolved-config echo into the output directory.
    Train(CommonArgs),
    /// Evaluate a policy snapshot against the config's environment.
    Eval {
        /// Policy snapshot JSON produced by `train`.
        #[arg(long)]
        policy: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the full gradient oracle suite and print the per-family
    /// max-relative-error table. Nonzero exit on any failure.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
        /// Randomized configurations per objective family.
        #[arg(long, default_value_t = 8)]
        cases: usize,
    },
    /// Emit a CSV of (t, lambda, beta, rho) over the schedule horizon.
    ScheduleDump(CommonArgs),
    /// Train each config with shared seeds and emit a combined Pass@k CSV
    /// (method, k, value, seed) for curve comparisons.
    Compare {
        /// Experiment configs; repeat the flag once per method.
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        /// Output directory; defaults to the first config's output root.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Base seed shared across methods.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of seeds per method (base, base+1, ...).
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        quiet: bool,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    init_thread_pool();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Eval { policy, common } => cmd_eval(&policy, &common),
        Command::Gradcheck { common, cases } => cmd_gradcheck(&common, cases),
        Command::ScheduleDump(args) => cmd_schedule_dump(&args),
        Command::Compare {
            configs,
            out,
            seed,
            seeds,
            quiet,
        } => cmd_compare(&configs, out.as_deref(), seed, seeds, quiet),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

/// NSRLAB_THREADS caps internal parallelism (rayon pool size).
fn init_thread_pool() {
    if let Ok(value) = std::env::var("NSRLAB_THREADS") {
        if let Ok(n) = value.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
        }
    }
}

fn load_config(args: &CommonArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::from_path(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        cfg.training.seed = seed;
    }
    let base_dir = args
        .config
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok((cfg, base_dir))
}

fn run_dir(args: &CommonArgs, cfg: &ExperimentConfig) -> PathBuf {
    args.out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.output_dir))
        .join(&cfg.run_name)
}

fn cmd_train(args: &CommonArgs) -> Result<()> {
    let (cfg, base_dir) = load_config(args)?;
    let resolved = cfg.resolve(&base_dir)?;
    let dir = run_dir(args, &cfg);
    fs::create_dir_all(&dir)?;
    fs::write(
        dir.join("config_resolved.json"),
        resolved.resolved.to_json_pretty(),
    )?;

    let mut train = resolved.train.clone();
    train.output_dir = Some(dir.clone());
    let outcome = run_training(&train)?;

    if !args.quiet {
        let final_mass = resolved.env.mean_correct_mass(&outcome.policy)?;
        println!(
            "trained `{}` for {} steps (seed {}); exact correct mass {:.4}",
            resolved.run_name, train.total_steps, train.seed, final_mass
        );
        println!("outputs in {}", dir.display());
    }
    Ok(())
}

fn cmd_eval(policy_path: &Path, args: &CommonArgs) -> Result<()> {
    let (cfg, base_dir) = load_config(args)?;
    let resolved = cfg.resolve(&base_dir)?;
    let json = fs::read_to_string(policy_path)
        .with_context(|| format!("reading {}", policy_path.display()))?;
    let policy = PolicyTable::<f64>::from_snapshot_json(&json)?;
    let report = evaluate_policy(
        &policy,
        &resolved.env,
        resolved.eval.samples_per_prompt,
        &resolved.eval.k_grid,
        resolved.eval.temperature,
        resolved.train.seed,
        resolved.train.exact_metrics,
    )?;
    let dir = run_dir(args, &cfg);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("eval_report.json"), report.to_json_pretty())?;
    if !args.quiet {
        print!("{}", report.to_text_table());
        println!(
            "report written to {}",
            dir.join("eval_report.json").display()
        );
    }
    Ok(())
}

fn cmd_gradcheck(args: &CommonArgs, cases: usize) -> Result<()> {
    let (cfg, _) = load_config(args)?;
    let reports = run_gradcheck_suite(cfg.training.seed, cases)?;
    print!("{}", format_report_table(&reports));
    if !suite_passes(&reports) {
        bail!("gradient oracle suite failed");
    }
    if !args.quiet {
        let total: usize = reports.iter().map(|r| r.cases).sum();
        println!("all families within tolerance over {total} configurations");
    }
    Ok(())
}

fn cmd_schedule_dump(args: &CommonArgs) -> Result<()> {
    let (cfg, base_dir) = load_config(args)?;
    let resolved = cfg.resolve(&base_dir)?;
    let schedule = resolved
        .objective
        .schedule
        .ok_or_else(|| anyhow::anyhow!("schedule-dump requires a `schedule` section"))?;
    if schedule.kind == ScheduleKind::PerformanceDriven {
        bail!("schedule-dump needs a time-based schedule; the performance-driven kind depends on the batch correct ratio");
    }
    let mut csv = String::from("t,lambda,beta,rho\n");
    for t in 0..=schedule.total_steps {
        let pair = weights(t, &schedule, None)?;
        let rho = effective_ratio(t, &schedule)?;
        csv.push_str(&format!("{t},{},{},{rho}\n", pair.lambda_t, pair.beta_t));
    }
    let dir = run_dir(args, &cfg);
    fs::create_dir_all(&dir)?;
    let path = dir.join("schedule.csv");
    fs::write(&path, csv)?;
    if !args.quiet {
        println!("schedule written to {}", path.display());
    }
    Ok(())
}

fn cmd_compare(
    configs: &[PathBuf],
    out: Option<&Path>,
    seed: Option<u64>,
    seeds: u64,
    quiet: bool,
) -> Result<()> {
    if seeds < 1 {
        bail!("--seeds must be at least 1");
    }
    let mut rows = String::from("method,k,value,seed\n");
    let mut out_dir: Option<PathBuf> = out.map(Path::to_path_buf);
    for config_path in configs {
        let cfg = ExperimentConfig::from_path(config_path)
            .with_context(|| format!("loading {}", config_path.display()))?;
        let base_dir = config_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let resolved = cfg.resolve(&base_dir)?;
        if out_dir.is_none() {
            out_dir = Some(PathBuf::from(&cfg.output_dir).join("compare"));
        }
        let base_seed = seed.unwrap_or(resolved.train.seed);
        for offset in 0..seeds {
            let run_seed = base_seed + offset;
            let mut train = resolved.train.clone();
            train.seed = run_seed;
            train.output_dir = None;
            let outcome = run_training(&train)?;
            let report = evaluate_policy(
                &outcome.policy,
                &resolved.env,
                resolved.eval.samples_per_prompt,
                &resolved.eval.k_grid,
                resolved.eval.temperature,
                run_seed,
                false,
            )?;
            for (k, value) in report.k_grid.iter().zip(&report.pass_at_k) {
                rows.push_str(&format!("{},{k},{value},{run_seed}\n", resolved.run_name));
            }
            if !quiet {
                println!(
                    "{}: seed {run_seed} pass@1 = {:.4}",
                    resolved.run_name, report.pass_at_k[0]
                );
            }
        }
    }
    let dir = out_dir.expect("at least one config");
    fs::create_dir_all(&dir)?;
    let path = dir.join("passk_compare.csv");
    fs::write(&path, rows)?;
    if !quiet {
        println!("comparison written to {}", path.display());
    }
    Ok(())
}
