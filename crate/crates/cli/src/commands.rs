use std::fs;
use std::path::{Path, PathBuf};

use bsmpc_core::bisim::{random_instance, verify_all, BisimWeights, BoundReport, CheckRow};
use bsmpc_core::config::RunConfig;
use bsmpc_core::envs::TabularMdp;
use bsmpc_core::losses::timing::{run_loss_bench, LossBenchConfig};
use bsmpc_core::trainer::{evaluate, load_checkpoint, Trainer};
use clap::{Args, ValueEnum};

use crate::CliError;

/// Environment variable that sets the output root when `--out` is absent.
pub const OUTPUT_ROOT_VAR: &str = "BSMPC_OUTPUT_ROOT";

fn list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliError> {
    s.split(',')
        .filter(|x| !x.trim().is_empty())
        .map(|x| x.trim().parse::<T>().map_err(|_| CliError::Usage(format!("bad {what} entry `{x}`"))))
        .collect()
}

fn revision() -> String {
    let git = std::process::Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into());
    format!("{}+{git}", env!("CARGO_PKG_VERSION"))
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML config file; defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds; one sequential run per seed.
    #[arg(long)]
    seed: Option<String>,
    /// Output root (overrides the config and the environment variable).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides.
    #[arg(long = "set")]
    set: Vec<String>,
}

pub fn train(a: TrainArgs, mut overrides: Vec<(String, String)>) -> Result<(), CliError> {
    for s in &a.set {
        overrides.push(bsmpc_core::config::parse_override(s)?);
    }
    if let Some(seeds) = &a.seed {
        let parsed: Vec<u64> = list(seeds, "seed")?;
        if parsed.is_empty() {
            return Err(CliError::Usage("--seed needs at least one value".into()));
        }
        overrides.push(("seeds".into(), format!("{parsed:?}")));
    }
    let cfg = match &a.config {
        Some(p) if !p.exists() => return Err(CliError::Usage(format!("config file {} not found", p.display()))),
        Some(p) => RunConfig::load(p, &overrides)?,
        None => RunConfig::from_toml_with("", &overrides)?,
    };
    let root = a
        .out
        .or_else(|| std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    fs::create_dir_all(&root)?;
    fs::write(root.join("config.toml"), cfg.to_toml()?)?;
    let rev = revision();
    for &seed in &cfg.seeds {
        let dir = root.join(format!("seed_{seed}"));
        let mut t = Trainer::new(cfg.clone(), seed)?;
        let s = t.run(&dir, &rev)?;
        let (m, sd) = s.final_eval.as_ref().map(|e| (e.mean, e.std)).unwrap_or((f64::NAN, f64::NAN));
        println!(
            "seed {seed}: {} env steps, {} updates, {} skipped, final eval {m:.1} ± {sd:.1}{} -> {}",
            s.env_steps,
            s.updates,
            s.skipped_steps,
            if s.stopped_early { " (stopped at target)" } else { "" },
            dir.display()
        );
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    if !a.checkpoint.exists() {
        return Err(CliError::Usage(format!("checkpoint {} not found", a.checkpoint.display())));
    }
    if a.episodes == 0 {
        return Err(CliError::Usage("--episodes must be positive".into()));
    }
    let (models, cfg) = load_checkpoint(&a.checkpoint)?;
    // Planner schedules at their final values.
    let step = cfg.planner.schedule_steps;
    let r = evaluate(&models, &cfg.planner, &cfg.env, a.episodes, a.seed, step)?;
    println!("episodes {}  mean {:.3}  std {:.3}", a.episodes, r.mean, r.std);
    for (i, x) in r.returns.iter().enumerate() {
        println!("  episode {i}: {x:.3}");
    }
    if let Some(p) = a.out {
        fs::write(p, serde_json::to_string_pretty(&r).map_err(|e| CliError::Runtime(e.to_string()))?)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum WeightsArg {
    /// `(1 - c, c)`: the weights the bounds are stated for.
    Convex,
    /// `(1, γ)` with the MDP's discount.
    Discounted,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// MDP in the tabular text format.
    #[arg(long, conflicts_with = "random")]
    mdp: Option<PathBuf>,
    /// Random instances with up to this many states.
    #[arg(long)]
    random: Option<usize>,
    /// Maximum number of actions of random instances.
    #[arg(long, default_value_t = 3)]
    actions: usize,
    /// Number of random instances (seeds `seed_start..`).
    #[arg(long, default_value_t = 100)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed_start: u64,
    /// Discount of random instances.
    #[arg(long, default_value_t = 0.9)]
    gamma: f64,
    #[arg(long, default_value = "0.05,0.2")]
    eps: String,
    #[arg(long, default_value = "0.5,0.9")]
    c: String,
    #[arg(long, default_value = "1,3,5")]
    horizons: String,
    /// Weights of the metric written to `metric.csv` (bounds always use the
    /// convex weights).
    #[arg(long, value_enum, default_value_t = WeightsArg::Convex)]
    weights: WeightsArg,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Output directory for `report.txt`, `checks.csv` and `metric.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn metric_csv(mdp: &TabularMdp, report: &BoundReport, weights: WeightsArg, c: f64, tol: f64) -> Result<String, CliError> {
    let m = match weights {
        WeightsArg::Convex => report.setup.metric.metric.clone(),
        WeightsArg::Discounted => {
            let pol = bsmpc_core::bisim::one_hot_policy(&report.setup.policy, mdp.n_actions);
            bsmpc_core::bisim::pi_bisim_metric(mdp, &pol, BisimWeights::discounted(mdp.gamma), tol)?.metric
        }
    };
    let mut s = format!("# weights {weights:?} c {c}\n");
    for i in 0..m.n {
        let row: Vec<String> = (0..m.n).map(|j| format!("{:e}", m.get(i, j))).collect();
        s += &row.join(",");
        s.push('\n');
    }
    Ok(s)
}

pub fn bisim_verify(a: VerifyArgs) -> Result<(), CliError> {
    let eps: Vec<f64> = list(&a.eps, "eps")?;
    let cs: Vec<f64> = list(&a.c, "c")?;
    let horizons: Vec<usize> = list(&a.horizons, "horizon")?;
    if eps.is_empty() || cs.is_empty() {
        return Err(CliError::Usage("need at least one eps and one c".into()));
    }
    let instances: Vec<(String, TabularMdp)> = match (&a.mdp, a.random) {
        (Some(p), _) => {
            if !p.exists() {
                return Err(CliError::Usage(format!("MDP file {} not found", p.display())));
            }
            vec![(p.display().to_string(), TabularMdp::load(p)?)]
        }
        (None, Some(n)) => (a.seed_start..a.seed_start + a.seeds)
            .map(|s| random_instance(s, n, a.actions, a.gamma).map(|m| (format!("seed{s}"), m)))
            .collect::<Result<_, _>>()?,
        (None, None) => return Err(CliError::Usage("give --mdp FILE or --random N".into())),
    };
    let single = instances.len() == 1;
    let mut text = String::new();
    let mut rows: Vec<CheckRow> = Vec::new();
    let mut metric_text = String::new();
    let (mut runs, mut failed_runs) = (0usize, 0usize);
    for (tag, mdp) in &instances {
        for &c in &cs {
            for &e in &eps {
                let r = verify_all(mdp, c, e, &horizons, a.tol)?;
                runs += 1;
                if !r.all_pass() {
                    failed_runs += 1;
                }
                if single || !r.all_pass() {
                    text += &format!("== {tag}  c {c}  eps {e}\n{}\n", r.to_text());
                }
                if single {
                    metric_text += &metric_csv(mdp, &r, a.weights, c, a.tol)?;
                }
                rows.extend(r.check_rows(tag));
            }
        }
    }
    let mut summary = format!("runs {runs}  failing runs {failed_runs}\n");
    for check in ["value", "return_h", "return_h_minus_1", "reward"] {
        let (n, bad) = rows.iter().filter(|r| r.check == check).fold((0, 0), |(n, b), r| (n + 1, b + usize::from(!r.pass)));
        summary += &format!("  {check:<17} violations {bad}/{n}\n");
    }
    print!("{summary}");
    if single {
        print!("{text}");
    }
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("report.txt"), format!("{summary}\n{text}"))?;
        let mut w = csv::Writer::from_path(out.join("checks.csv")).map_err(|e| CliError::Runtime(e.to_string()))?;
        for r in &rows {
            w.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
        }
        w.flush()?;
        if single {
            fs::write(out.join("metric.csv"), metric_text)?;
        }
    }
    if failed_runs > 0 {
        return Err(CliError::Bound(format!("{failed_runs} of {runs} runs violate a bound")));
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 5)]
    horizon: usize,
    #[arg(long, default_value = "1,4")]
    workers: String,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 16)]
    latent: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the timing table as CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn bench_loss(a: BenchArgs) -> Result<(), CliError> {
    if a.repeats == 0 {
        return Err(CliError::Usage("--repeats must be at least 1".into()));
    }
    if a.batch < 2 || a.horizon == 0 {
        return Err(CliError::Usage("need --batch >= 2 and --horizon >= 1".into()));
    }
    let cfg = LossBenchConfig {
        batch: a.batch,
        horizon: a.horizon,
        workers: list(&a.workers, "workers")?,
        repeats: a.repeats,
        hidden_dim: a.hidden,
        latent_dim: a.latent,
        seed: a.seed,
        ..Default::default()
    };
    let r = run_loss_bench(&cfg)?;
    print!("{}", r.to_text());
    if let Some(p) = &a.out {
        write_rows(p, &r.rows)?;
    }
    if r.max_rel_diff() > 1e-12 {
        return Err(CliError::Bound(format!("parallel and single-worker objectives differ by {:e}", r.max_rel_diff())));
    }
    Ok(())
}

fn write_rows<T: serde::Serialize>(p: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(p).map_err(|e| CliError::Runtime(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
