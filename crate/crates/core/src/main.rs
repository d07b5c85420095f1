use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mrlab::config::load_config;
use mrlab::gradcheck;
use mrlab::metrics::{l1_minimizer_scan, se_ve_decomposition};
use mrlab::runner::{self, RunStatus};
use mrlab::train::{evaluate, TrainConfig};

/// Moment reconstruction losses for conditional GANs on toy problems.
#[derive(Parser)]
#[command(name = "mrlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Train {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one run per value of a numeric key.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        key: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also check a deliberately wrong gradient rule, which must fail.
        #[arg(long, hide = true)]
        include_negative_control: bool,
    },
    /// Split squared error into variance, systematic and variance effects.
    Decompose {
        /// `two_delta`, `zero_two`, or a CSV with columns y,y_hat.
        source: String,
        /// Constant prediction used with `two_delta`.
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        constant: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Brute-force the minimizers of the expected absolute error.
    MedianScan {
        /// `two_delta`, `three_point`, or a CSV with columns value,prob.
        source: String,
    },
    /// Evaluate a generator or predictor checkpoint.
    Eval { checkpoint: PathBuf, config: PathBuf },
}

fn load_with_env(path: &Path) -> Result<TrainConfig> {
    let mut cfg = load_config(path).with_context(|| format!("loading {}", path.display()))?;
    if let Ok(seed) = std::env::var("MRLAB_SEED") {
        cfg.seed = seed
            .trim()
            .parse()
            .with_context(|| format!("MRLAB_SEED `{seed}` is not an unsigned integer"))?;
    }
    Ok(cfg)
}

fn is_builtin(source: &str, names: &[&str]) -> bool {
    names.contains(&source) && !Path::new(source).exists()
}

fn fmt_opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "-".into(), |v| v.to_string())
}

fn train(config: &Path, out: &Path) -> Result<ExitCode> {
    let cfg = load_with_env(config)?;
    let outcome = runner::run_train(&cfg, out)?;
    println!("run {} -> {}", outcome.run_id, out.display());
    if let Some(m) = &outcome.final_metrics {
        println!(
            "step {} modes {} hq {} mean_abs_err {} var_rel_err {} sample_variance {} diversity {}",
            m.step,
            fmt_opt(m.modes_captured),
            fmt_opt(m.hq_fraction),
            fmt_opt(m.mean_abs_err),
            fmt_opt(m.var_rel_err),
            fmt_opt(m.sample_variance),
            fmt_opt(m.diversity),
        );
    }
    match outcome.status {
        RunStatus::Completed => Ok(ExitCode::SUCCESS),
        _ => {
            eprintln!("run aborted: {}", outcome.error.unwrap_or_default());
            Ok(ExitCode::from(2))
        }
    }
}

fn sweep(config: &Path, key: &str, values: &[String], out: &Path, jobs: usize) -> Result<ExitCode> {
    let cfg = load_with_env(config)?;
    let entries = runner::run_sweep(&cfg, key, values, out, jobs)?;
    let mut failures = 0;
    for e in &entries {
        match &e.outcome {
            Ok(o) if o.status == RunStatus::Completed => println!("{key}={}: ok ({})", e.value, o.run_id),
            Ok(o) => {
                failures += 1;
                println!("{key}={}: diverged: {}", e.value, o.error.as_deref().unwrap_or(""));
            }
            Err(msg) => {
                failures += 1;
                println!("{key}={}: failed: {msg}", e.value);
            }
        }
    }
    println!("summary: {}", out.join(runner::SUMMARY_FILE).display());
    Ok(if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn gradcheck_cmd(seed: u64, negative_control: bool) -> Result<ExitCode> {
    let mut results = gradcheck::run_all(seed)?;
    if negative_control {
        results.push(gradcheck::check_corrupted_rule()?);
    }
    let mut ok = true;
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        ok &= r.passed();
        println!(
            "{verdict:4} {:<28} max_rel_err {:.3e} (tol {:.0e})",
            r.name, r.max_rel_error, r.tolerance
        );
    }
    println!("{} checks, {}", results.len(), if ok { "all passed" } else { "FAILURES" });
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn decompose(source: &str, constant: f64, seed: u64) -> Result<ExitCode> {
    let (y, y_hat) = if is_builtin(source, &runner::DECOMPOSE_BUILTINS) {
        runner::decompose_builtin(source, constant, seed)?
    } else {
        runner::read_decompose_csv(Path::new(source))?
    };
    let r = se_ve_decomposition(&y, &y_hat)?;
    println!("n_y {} n_y_hat {}", y.len(), y_hat.len());
    println!("var {:.6}", r.var_y);
    println!("se {:.6}", r.se);
    println!("ve {:.6}", r.ve);
    println!("total {:.6}", r.total);
    println!("identity_residual {:.3e}", r.identity_residual);
    Ok(ExitCode::SUCCESS)
}

fn median_scan(source: &str) -> Result<ExitCode> {
    let dist = if is_builtin(source, &runner::MEDIAN_BUILTINS) {
        runner::median_builtin(source)?
    } else {
        runner::read_distribution_csv(Path::new(source))?
    };
    let scan = l1_minimizer_scan(&dist, &runner::median_grid(&dist))?;
    let (Some(lo), Some(hi)) = (scan.argmin.first(), scan.argmin.last()) else {
        bail!("scan found no minimizer");
    };
    println!("min_value {:.6}", scan.min_value);
    println!("argmin [{lo:.3}, {hi:.3}] ({} grid points)", scan.argmin.len());
    println!(
        "median_interval [{}, {}]",
        scan.median_interval.0, scan.median_interval.1
    );
    Ok(ExitCode::SUCCESS)
}

fn eval_cmd(checkpoint: &Path, config: &Path) -> Result<ExitCode> {
    let cfg = load_with_env(config)?;
    let sampler = runner::load_sampler(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let e = evaluate(sampler.as_ref(), &cfg, &mut rng)?;
    println!("modes_captured {}", fmt_opt(e.modes_captured));
    println!("hq_fraction {}", fmt_opt(e.hq_fraction));
    println!("mean_abs_err {}", fmt_opt(e.mean_abs_err));
    println!("var_rel_err {}", fmt_opt(e.var_rel_err));
    println!("sample_variance {}", fmt_opt(e.sample_variance));
    println!("diversity {}", fmt_opt(e.diversity));
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Train { config, out } => train(config, out),
        Command::Sweep {
            config,
            key,
            values,
            out,
            jobs,
        } => sweep(config, key, values, out, *jobs),
        Command::Gradcheck {
            seed,
            include_negative_control,
        } => gradcheck_cmd(*seed, *include_negative_control),
        Command::Decompose {
            source,
            constant,
            seed,
        } => decompose(source, *constant, *seed),
        Command::MedianScan { source } => median_scan(source),
        Command::Eval { checkpoint, config } => eval_cmd(checkpoint, config),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
