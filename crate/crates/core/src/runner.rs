//! Experiment orchestration and the on-disk run layout.
//!
//! A run directory holds `metrics.csv`, `samples.csv`, `manifest.json` and
//! one checkpoint per trained network. A run that fails leaves a `FAILED`
//! marker next to whatever it managed to write.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{config_entries, is_sweepable, serialize_config, set_key};
use crate::data::DatasetKind;
use crate::error::{config, Error, Result};
use crate::losses::Family;
use crate::metrics::{x_grid, Sampler};
use crate::nets::{Checkpoint, Discriminator, Generator, Predictor};
use crate::tensor::Tensor;
use crate::train::{train_gan, EvalSummary, HistoryRow, Models, TrainConfig};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FAILURE_MARKER: &str = "FAILED";
pub const SUMMARY_FILE: &str = "summary.csv";

pub const METRICS_COLUMNS: [&str; 14] = [
    "run_id",
    "variant",
    "seed",
    "step",
    "loss_d",
    "loss_g_gan",
    "loss_aux",
    "loss_rec",
    "modes_captured",
    "hq_fraction",
    "mean_abs_err",
    "var_rel_err",
    "diversity",
    "wall_ms",
];

/// Samples per grid point in `samples.csv` for conditional datasets.
pub const SAMPLES_PER_X: usize = 20;
/// Grid points in `samples.csv` for conditional datasets.
pub const SAMPLE_GRID: usize = 21;
/// Rows of `samples.csv` for unconditional datasets.
pub const UNCONDITIONAL_SAMPLES: usize = 5000;

/// Seed plus the first 12 hex digits of the SHA-256 of the serialized config.
pub fn run_id(cfg: &TrainConfig) -> String {
    let digest = Sha256::digest(serialize_config(cfg).as_bytes());
    let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
    format!("s{}-{hex}", cfg.seed)
}

fn cell<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn metrics_header() -> String {
    METRICS_COLUMNS.join(",")
}

pub fn metrics_line(run_id: &str, cfg: &TrainConfig, row: &HistoryRow) -> String {
    let e = &row.eval;
    [
        run_id.to_string(),
        cfg.variant.to_string(),
        cfg.seed.to_string(),
        row.step.to_string(),
        cell(row.loss_d),
        cell(row.loss_g_gan),
        cell(row.loss_aux),
        cell(row.loss_rec),
        cell(e.modes_captured),
        cell(e.hq_fraction),
        cell(e.mean_abs_err),
        cell(e.var_rel_err),
        cell(e.diversity),
        cell(row.wall_ms),
    ]
    .join(",")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct FinalMetrics {
    pub step: usize,
    pub modes_captured: Option<usize>,
    pub hq_fraction: Option<f64>,
    pub mean_abs_err: Option<f64>,
    pub var_rel_err: Option<f64>,
    pub sample_variance: Option<f64>,
    pub diversity: Option<f64>,
}

impl FinalMetrics {
    fn from_eval(step: usize, e: &EvalSummary) -> Self {
        Self {
            step,
            modes_captured: e.modes_captured,
            hq_fraction: e.hq_fraction,
            mean_abs_err: e.mean_abs_err,
            var_rel_err: e.var_rel_err,
            sample_variance: e.sample_variance,
            diversity: e.diversity,
        }
    }
}

/// Contents of `manifest.json`.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentManifest {
    pub run_id: String,
    /// Every config key with its serialized value.
    pub config: std::collections::BTreeMap<String, String>,
    /// The same config in `key = value` form, parseable by `parse_config`.
    pub config_text: String,
    pub seed: u64,
    pub version: String,
    pub start_unix_ms: u128,
    pub end_unix_ms: u128,
    pub status: RunStatus,
    pub error: Option<String>,
    pub final_metrics: Option<FinalMetrics>,
    pub predictor_best_epoch: Option<usize>,
    pub predictor_epochs: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_id: String,
    pub dir: PathBuf,
    pub status: RunStatus,
    pub error: Option<String>,
    pub final_metrics: Option<FinalMetrics>,
}

fn unix_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

fn write_marker(dir: &Path, msg: &str) -> Result<()> {
    fs::write(dir.join(FAILURE_MARKER), format!("{msg}\n"))?;
    Ok(())
}

/// Trains one configuration into `out_dir`. Numeric divergence is reported
/// through the returned status; any other failure leaves the failure marker
/// and is returned as an error.
pub fn run_train(cfg: &TrainConfig, out_dir: &Path) -> Result<RunOutcome> {
    fs::create_dir_all(out_dir)?;
    let marker = out_dir.join(FAILURE_MARKER);
    if marker.exists() {
        fs::remove_file(&marker)?;
    }
    match run_train_inner(cfg, out_dir) {
        Ok(outcome) => Ok(outcome),
        Err(e) => {
            write_marker(out_dir, &e.to_string())?;
            Err(e)
        }
    }
}

fn run_train_inner(cfg: &TrainConfig, out_dir: &Path) -> Result<RunOutcome> {
    let start = unix_ms();
    let id = run_id(cfg);
    let mut csv = BufWriter::new(File::create(out_dir.join(METRICS_FILE))?);
    writeln!(csv, "{}", metrics_header())?;
    csv.flush()?;
    let mut io_err = None;
    let run = train_gan(cfg, |row| {
        let res = writeln!(csv, "{}", metrics_line(&id, cfg, row)).and_then(|_| csv.flush());
        if let Err(e) = res {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    drop(csv);

    save_checkpoints(&run.models, cfg, &id, out_dir)?;
    write_samples(&run.models, cfg, &out_dir.join(SAMPLES_FILE))?;

    let final_metrics = run
        .history
        .rows
        .last()
        .map(|r| FinalMetrics::from_eval(r.step, &r.eval));
    let (status, error) = match &run.abort {
        None => (RunStatus::Completed, None),
        Some(e) => (RunStatus::Diverged, Some(e.to_string())),
    };
    let manifest = ExperimentManifest {
        run_id: id.clone(),
        config: config_entries(cfg)
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        config_text: serialize_config(cfg),
        seed: cfg.seed,
        version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).to_string(),
        start_unix_ms: start,
        end_unix_ms: unix_ms(),
        status,
        error: error.clone(),
        final_metrics: final_metrics.clone(),
        predictor_best_epoch: run.history.predictor_best_epoch,
        predictor_epochs: run.history.predictor_val_curve.len(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    fs::write(out_dir.join(MANIFEST_FILE), json + "\n")?;
    if let Some(msg) = &error {
        write_marker(out_dir, msg)?;
    }
    Ok(RunOutcome {
        run_id: id,
        dir: out_dir.to_path_buf(),
        status,
        error,
        final_metrics,
    })
}

fn save_checkpoints(models: &Models, cfg: &TrainConfig, id: &str, dir: &Path) -> Result<()> {
    let base = |net, role: &str, x_dim: usize| {
        Checkpoint::new(net)
            .with("role", role)
            .with("run_id", id)
            .with("variant", cfg.variant)
            .with("dataset", cfg.dataset.name())
            .with("x_dim", x_dim)
    };
    if let Some(g) = &models.generator {
        base(g.net.clone(), "generator", g.x_dim)
            .with("noise_dim", g.noise_dim)
            .save(&dir.join("generator.ckpt"))?;
    }
    if let Some(d) = &models.discriminator {
        base(d.net.clone(), "discriminator", d.x_dim).save(&dir.join("discriminator.ckpt"))?;
    }
    if let Some(p) = &models.predictor {
        base(p.net.clone(), "predictor", p.x_dim)
            .with("family", p.family)
            .save(&dir.join("predictor.ckpt"))?;
    }
    Ok(())
}

/// The network that produces samples: the generator, or the predictor for
/// `mle_only` runs.
fn primary_sampler(models: &Models) -> Option<&dyn Sampler> {
    match (&models.generator, &models.predictor) {
        (Some(g), _) => Some(g),
        (None, Some(p)) => Some(p),
        (None, None) => None,
    }
}

/// Writes final samples: `SAMPLES_PER_X` draws at each of `SAMPLE_GRID`
/// grid points, or `UNCONDITIONAL_SAMPLES` draws without conditioning.
pub fn write_samples(models: &Models, cfg: &TrainConfig, path: &Path) -> Result<()> {
    let Some(sampler) = primary_sampler(models) else {
        return Ok(());
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(4);
    let x = match cfg.dataset.x_dim() {
        0 => Tensor::zeros(UNCONDITIONAL_SAMPLES, 0),
        _ => {
            let xs: Vec<f64> = x_grid(SAMPLE_GRID)
                .into_iter()
                .flat_map(|x| std::iter::repeat_n(x, SAMPLES_PER_X))
                .collect();
            Tensor::new(xs.len(), 1, xs)?
        }
    };
    let y = sampler.draw(&x, &mut rng)?;
    let mut w = BufWriter::new(File::create(path)?);
    crate::data::Batch::new(x, y)?.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Rebuilds a sampler from a generator or predictor checkpoint.
pub fn load_sampler(path: &Path) -> Result<Box<dyn Sampler>> {
    let ck = Checkpoint::load(path)?;
    let role = ck.meta.get("role").map(String::as_str).unwrap_or("");
    let x_dim = ck.meta_usize("x_dim")?;
    match role {
        "generator" => Ok(Box::new(Generator {
            noise_dim: ck.meta_usize("noise_dim")?,
            x_dim,
            net: ck.net,
        })),
        "predictor" => {
            let family: Family = ck
                .meta
                .get("family")
                .ok_or_else(|| Error::Checkpoint("missing meta `family`".into()))?
                .parse()
                .map_err(Error::Checkpoint)?;
            Ok(Box::new(Predictor {
                net: ck.net,
                x_dim,
                family,
            }))
        }
        other => Err(Error::Checkpoint(format!(
            "cannot sample from a `{other}` checkpoint"
        ))),
    }
}

/// Loads a discriminator checkpoint; used to inspect finished runs.
pub fn load_discriminator(path: &Path) -> Result<Discriminator> {
    let ck = Checkpoint::load(path)?;
    Ok(Discriminator {
        x_dim: ck.meta_usize("x_dim")?,
        net: ck.net,
    })
}

#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub value: String,
    pub outcome: std::result::Result<RunOutcome, String>,
}

pub const SUMMARY_COLUMNS: [&str; 11] = [
    "value",
    "run_id",
    "status",
    "step",
    "modes_captured",
    "hq_fraction",
    "mean_abs_err",
    "var_rel_err",
    "sample_variance",
    "diversity",
    "error",
];

fn summary_line(e: &SweepEntry) -> String {
    let quote = |s: &str| format!("\"{}\"", s.replace('"', "\"\""));
    match &e.outcome {
        Ok(o) => {
            let m = o.final_metrics.as_ref();
            [
                e.value.clone(),
                o.run_id.clone(),
                serde_json::to_value(o.status)
                    .ok()
                    .and_then(|v| v.as_str().map(String::from))
                    .unwrap_or_default(),
                cell(m.map(|m| m.step)),
                cell(m.and_then(|m| m.modes_captured)),
                cell(m.and_then(|m| m.hq_fraction)),
                cell(m.and_then(|m| m.mean_abs_err)),
                cell(m.and_then(|m| m.var_rel_err)),
                cell(m.and_then(|m| m.sample_variance)),
                cell(m.and_then(|m| m.diversity)),
                o.error.as_deref().map(quote).unwrap_or_default(),
            ]
            .join(",")
        }
        Err(msg) => {
            let mut cols = vec![e.value.clone(), String::new(), "failed".into()];
            cols.extend(std::iter::repeat_n(String::new(), 7));
            cols.push(quote(msg));
            cols.join(",")
        }
    }
}

/// Subdirectory used for one sweep value.
pub fn sweep_dir(out_dir: &Path, key: &str, value: &str) -> PathBuf {
    out_dir.join(format!("{key}={value}"))
}

/// Runs one training job per value of `key`, at most `jobs` at a time, and
/// writes `summary.csv` with one row per value in the given order. Failed
/// runs are recorded and do not stop the sweep.
pub fn run_sweep(
    base: &TrainConfig,
    key: &str,
    values: &[String],
    out_dir: &Path,
    jobs: usize,
) -> Result<Vec<SweepEntry>> {
    if !is_sweepable(key) {
        return Err(config(format!("`{key}` is not a sweepable numeric key")));
    }
    if values.is_empty() {
        return Err(config("sweep needs at least one value"));
    }
    let mut configs = Vec::with_capacity(values.len());
    for v in values {
        let mut cfg = base.clone();
        set_key(&mut cfg, key, v).map_err(|m| config(format!("{key} = {v}: {m}")))?;
        configs.push(cfg);
    }
    fs::create_dir_all(out_dir)?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<SweepEntry>>> = Mutex::new(vec![None; values.len()]);
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, values.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= values.len() {
                    break;
                }
                let dir = sweep_dir(out_dir, key, &values[i]);
                let outcome = run_train(&configs[i], &dir).map_err(|e| e.to_string());
                let entry = SweepEntry {
                    value: values[i].clone(),
                    outcome,
                };
                results.lock().expect("sweep results lock")[i] = Some(entry);
            });
        }
    });
    let entries: Vec<SweepEntry> = results
        .into_inner()
        .expect("sweep results lock")
        .into_iter()
        .map(|e| e.expect("every sweep value runs"))
        .collect();

    let mut w = BufWriter::new(File::create(out_dir.join(SUMMARY_FILE))?);
    writeln!(w, "key,{}", SUMMARY_COLUMNS.join(","))?;
    for e in &entries {
        writeln!(w, "{key},{}", summary_line(e))?;
    }
    w.flush()?;
    Ok(entries)
}

/// Named sample sets for the decomposition command.
pub const DECOMPOSE_BUILTINS: [&str; 2] = ["two_delta", "zero_two"];
/// Draws used by the `two_delta` decomposition.
pub const DECOMPOSE_DRAWS: usize = 10_000;

/// Observations and predictions for a built-in decomposition. `two_delta`
/// draws ±1 with equal probability against a constant prediction;
/// `zero_two` is the exact set {0, 2} against the constant 1.
pub fn decompose_builtin(name: &str, constant: f64, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    match name {
        "two_delta" => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch = DatasetKind::TwoDelta.sample(DECOMPOSE_DRAWS, &mut rng)?;
            let y = batch.y.data().to_vec();
            Ok((y, vec![constant; DECOMPOSE_DRAWS]))
        }
        "zero_two" => Ok((vec![0.0, 2.0], vec![1.0, 1.0])),
        other => Err(config(format!("unknown built-in `{other}`"))),
    }
}

fn csv_rows(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let f = File::open(path)?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        rows.push((i + 1, line.split(',').map(|c| c.trim().to_string()).collect()));
    }
    Ok(rows)
}

fn parse_cell(path: &Path, line: usize, s: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| config(format!("{}:{line}: cannot parse `{s}`", path.display())))
}

/// Reads a two-column `y,y_hat` CSV. The header is optional and either
/// column may have empty cells when the sample counts differ.
pub fn read_decompose_csv(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let (mut y, mut y_hat) = (Vec::new(), Vec::new());
    for (k, (line, cols)) in csv_rows(path)?.into_iter().enumerate() {
        if k == 0 && cols.first().is_some_and(|c| c == "y") {
            continue;
        }
        if cols.len() != 2 {
            return Err(config(format!(
                "{}:{line}: expected 2 columns, found {}",
                path.display(),
                cols.len()
            )));
        }
        if !cols[0].is_empty() {
            y.push(parse_cell(path, line, &cols[0])?);
        }
        if !cols[1].is_empty() {
            y_hat.push(parse_cell(path, line, &cols[1])?);
        }
    }
    Ok((y, y_hat))
}

/// Named discrete distributions for the median scan.
pub const MEDIAN_BUILTINS: [&str; 2] = ["two_delta", "three_point"];

pub fn median_builtin(name: &str) -> Result<Vec<(f64, f64)>> {
    match name {
        "two_delta" => Ok(vec![(-1.0, 0.5), (1.0, 0.5)]),
        "three_point" => Ok(vec![(0.0, 0.25), (1.0, 0.5), (2.0, 0.25)]),
        other => Err(config(format!("unknown built-in `{other}`"))),
    }
}

/// Reads a `value,prob` CSV with an optional header.
pub fn read_distribution_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut dist = Vec::new();
    for (k, (line, cols)) in csv_rows(path)?.into_iter().enumerate() {
        if k == 0 && cols.first().is_some_and(|c| c == "value") {
            continue;
        }
        if cols.len() != 2 {
            return Err(config(format!(
                "{}:{line}: expected 2 columns, found {}",
                path.display(),
                cols.len()
            )));
        }
        dist.push((parse_cell(path, line, &cols[0])?, parse_cell(path, line, &cols[1])?));
    }
    if dist.is_empty() {
        return Err(config(format!("{}: no rows", path.display())));
    }
    Ok(dist)
}

/// Grid step of the median scan.
pub const MEDIAN_GRID_STEP: f64 = 1e-3;

/// Scan grid from one below the smallest support point to one above the largest.
pub fn median_grid(dist: &[(f64, f64)]) -> Vec<f64> {
    let lo = dist.iter().map(|d| d.0).fold(f64::INFINITY, f64::min);
    let hi = dist.iter().map(|d| d.0).fold(f64::NEG_INFINITY, f64::max);
    crate::metrics::uniform_grid(lo - 1.0, hi + 1.0, MEDIAN_GRID_STEP)
}
