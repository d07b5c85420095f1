//! AMSGrad, predictor pretraining with early stopping, and the alternating
//! GAN loop for every generator variant.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Batch, DatasetKind, DatasetSpec, Splits};
use crate::error::{config, Error, Result};
use crate::losses::{
    aux_loss, gan_d_loss, gan_g_loss, generator_objective, mle_loss, recon_loss_samples,
    Family, MomentEstimate, ObjectiveParts, VariantId,
};
use crate::metrics::{
    conditional_moment_error, mode_coverage, pairwise_diversity, x_grid, Sampler,
};
use crate::nets::{gaussian_noise, Activation, ArchSpec, Discriminator, Generator, Predictor};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Per-entry gradient clipping bound; `None` disables clipping.
    pub clip_value: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_value: Some(0.5),
        }
    }
}

/// AMSGrad with bias-corrected first moment, uncorrected running-max second
/// moment, and decoupled weight decay applied after the step.
#[derive(Debug, Clone)]
pub struct AmsGrad {
    pub cfg: OptimConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub v_hat: Vec<Tensor>,
    pub t: u64,
}

impl AmsGrad {
    pub fn new(cfg: OptimConfig, params: &[Tensor]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.rows(), p.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            v_hat: zeros(),
            t: 0,
        }
    }

    /// One update. `label` names the network in divergence diagnostics.
    pub fn step(&mut self, label: &str, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "{label}: optimizer holds {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "{label} {}: param {:?} vs grad {:?}",
                    param_name(i),
                    p.shape(),
                    g.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in {label} parameter {}",
                    param_name(i)
                )));
            }
        }
        let OptimConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.cfg;
        self.t += 1;
        let correction = 1.0 - beta1.powi(self.t as i32);
        let decay = 1.0 - lr * weight_decay;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let v_hat = self.v_hat[i].data_mut();
            for (j, (theta, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                v_hat[j] = v_hat[j].max(v[j]);
                let m_hat = m[j] / correction;
                *theta -= lr * m_hat / (v_hat[j].sqrt() + eps);
                *theta *= decay;
            }
        }
        Ok(())
    }
}

/// `W0, b0, W1, b1, ...`
pub fn param_name(i: usize) -> String {
    format!("{}{}", if i % 2 == 0 { 'W' } else { 'b' }, i / 2)
}

pub fn clip_by_value(grads: &mut [Tensor], c: f64) {
    for g in grads {
        g.data_mut().iter_mut().for_each(|v| *v = v.clamp(-c, c));
    }
}

/// Full experiment configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub variant: VariantId,
    pub dataset: DatasetKind,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub optim: OptimConfig,
    /// Generator samples per input.
    pub k: usize,
    /// Weight of the variant's auxiliary loss; `None` uses the variant default.
    pub lambda_aux: Option<f64>,
    pub lambda_rec: f64,
    /// Norm of the reconstruction term weighted by `lambda_rec`.
    pub rec_p: u8,
    pub batch_d: usize,
    pub batch_g: usize,
    pub d_steps: usize,
    pub g_steps: usize,
    /// Total generator updates.
    pub steps: usize,
    pub eval_interval: usize,
    pub noise_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub pred_batch: usize,
    pub pred_max_epochs: usize,
    pub patience: usize,
    /// Samples per grid point when evaluating conditional moments.
    pub eval_k: usize,
    pub eval_grid: usize,
    /// Samples drawn for unconditional coverage metrics.
    pub eval_samples: usize,
    pub capture_share: f64,
    pub seed: u64,
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: VariantId::GMr2,
            dataset: DatasetKind::ring8(),
            n_train: 20_000,
            n_val: 2_000,
            n_test: 2_000,
            optim: OptimConfig::default(),
            k: 10,
            lambda_aux: None,
            lambda_rec: 0.0,
            rec_p: 1,
            batch_d: 64,
            batch_g: 32,
            d_steps: 1,
            g_steps: 1,
            steps: 20_000,
            eval_interval: 500,
            noise_dim: 8,
            hidden: vec![64, 64, 64],
            activation: Activation::LeakyRelu(0.2),
            pred_batch: 64,
            pred_max_epochs: 200,
            patience: 20,
            eval_k: 200,
            eval_grid: 21,
            eval_samples: 5000,
            capture_share: 0.02,
            seed: 0,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    /// The auxiliary weight in effect: 100 for the reconstruction baselines,
    /// 10 for moment losses, unless set explicitly.
    pub fn lambda_aux(&self) -> f64 {
        self.lambda_aux.unwrap_or(match self.variant {
            VariantId::GanL1 | VariantId::GanL2 => 100.0,
            _ => 10.0,
        })
    }

    pub fn arch(&self) -> ArchSpec {
        ArchSpec {
            hidden: self.hidden.clone(),
            activation: self.activation,
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            kind: self.dataset,
            n_train: self.n_train,
            n_val: self.n_val,
            n_test: self.n_test,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|(key, msg)| config(format!("{key}: {msg}")))
    }

    /// Like [`TrainConfig::validate`], but names the offending key.
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(("lr", format!("must be positive, got {}", o.lr)));
        }
        for (name, b) in [("beta1", o.beta1), ("beta2", o.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err((name, format!("must lie in [0, 1), got {b}")));
            }
        }
        if !(o.eps > 0.0 && o.eps.is_finite()) {
            return Err(("eps", format!("must be positive, got {}", o.eps)));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return Err(("weight_decay", "must be finite and nonnegative".into()));
        }
        if let Some(c) = o.clip_value {
            if !(c > 0.0 && c.is_finite()) {
                return Err(("clip_value", format!("must be positive, got {c}")));
            }
        }
        if let Err(e) = self.dataset.validate() {
            return Err(("dataset", e.to_string()));
        }
        if self.variant.needs_multiple_samples() && self.k < 2 {
            return Err(("k", format!("must be at least 2 for {}, got {}", self.variant, self.k)));
        }
        let positive = [
            ("n_train", self.n_train),
            ("n_val", self.n_val),
            ("n_test", self.n_test),
            ("k", self.k),
            ("batch_d", self.batch_d),
            ("batch_g", self.batch_g),
            ("d_steps", self.d_steps),
            ("g_steps", self.g_steps),
            ("steps", self.steps),
            ("eval_interval", self.eval_interval),
            ("noise_dim", self.noise_dim),
            ("pred_batch", self.pred_batch),
            ("pred_max_epochs", self.pred_max_epochs),
            ("patience", self.patience),
            ("eval_grid", self.eval_grid),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err((name, "must be positive".into()));
        }
        if self.eval_k < 2 {
            return Err(("eval_k", "must be at least 2".into()));
        }
        let min = crate::metrics::MIN_COVERAGE_SAMPLES;
        if self.dataset.x_dim() == 0 && self.eval_samples < min {
            return Err(("eval_samples", format!("must be at least {min}")));
        }
        if !(0.0..=1.0).contains(&self.capture_share) {
            return Err(("capture_share", "must lie in [0, 1]".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(("hidden", "must be a nonempty list of positive widths".into()));
        }
        let lam = self.lambda_aux();
        if !(lam >= 0.0 && lam.is_finite()) {
            return Err(("lambda_aux", "must be finite and nonnegative".into()));
        }
        if !(self.lambda_rec >= 0.0 && self.lambda_rec.is_finite()) {
            return Err(("lambda_rec", "must be finite and nonnegative".into()));
        }
        if self.rec_p != 1 && self.rec_p != 2 {
            return Err(("rec_p", format!("must be 1 or 2, got {}", self.rec_p)));
        }
        Ok(())
    }

    /// Predictor family implied by the variant.
    pub fn predictor_family(&self) -> Option<Family> {
        if self.variant.needs_predictor() {
            self.variant.family()
        } else {
            None
        }
    }
}

/// Result of predictor pretraining.
#[derive(Debug, Clone)]
pub struct PredictorRun {
    pub predictor: Predictor,
    /// Validation loss after every epoch.
    pub val_curve: Vec<f64>,
    /// Zero-based epoch of the returned parameters.
    pub best_epoch: usize,
}

fn mle_value(p: &Predictor, batch: &Batch) -> Result<f64> {
    let tape = Tape::new();
    let bound = p.net.bind(&tape, false);
    let out = p.forward(&bound, &batch.x)?;
    let est = MomentEstimate::from_predictor(&out)?;
    Ok(mle_loss(&est, tape.constant(&batch.y))?.item()?)
}

/// Trains a predictor by maximum likelihood, keeping the parameters with the
/// lowest validation loss and stopping after `patience` epochs without
/// improvement.
pub fn train_predictor<R: Rng + ?Sized>(
    data: &Splits,
    family: Family,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<PredictorRun> {
    cfg.validate()?;
    let x_dim = data.train.x_dim();
    let mut p = Predictor::new(x_dim, data.train.y_dim(), family, &cfg.arch(), rng)?;
    let mut opt = AmsGrad::new(cfg.optim, p.net.params());
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut best = (f64::INFINITY, 0usize, p.clone());
    let mut val_curve = Vec::new();
    for epoch in 0..cfg.pred_max_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.pred_batch) {
            let batch = data.train.select(chunk);
            let tape = Tape::new();
            let bound = p.net.bind(&tape, true);
            let out = p.forward(&bound, &batch.x)?;
            let est = MomentEstimate::from_predictor(&out)?;
            let loss = mle_loss(&est, tape.constant(&batch.y))?;
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    stage: "predictor epoch",
                    index: epoch,
                    detail: format!("training loss {value}"),
                });
            }
            let grads = gradients(&tape, loss, &bound)?;
            apply_step(&mut opt, "predictor", p.net.params_mut(), grads).map_err(|e| {
                Error::Diverged {
                    stage: "predictor epoch",
                    index: epoch,
                    detail: e.to_string(),
                }
            })?;
        }
        let val = mle_value(&p, &data.val)?;
        if !val.is_finite() {
            return Err(Error::Diverged {
                stage: "predictor epoch",
                index: epoch,
                detail: format!("validation loss {val}"),
            });
        }
        val_curve.push(val);
        if val < best.0 {
            best = (val, epoch, p.clone());
        } else if epoch - best.1 >= cfg.patience {
            break;
        }
    }
    Ok(PredictorRun {
        predictor: best.2,
        val_curve,
        best_epoch: best.1,
    })
}

fn gradients<'t>(tape: &'t Tape, loss: Var<'t>, bound: &[Var<'t>]) -> Result<Vec<Tensor>> {
    let g = tape.backward(loss)?;
    Ok(bound.iter().map(|&v| g.wrt(v)).collect())
}

fn apply_step(
    opt: &mut AmsGrad,
    label: &str,
    params: &mut [Tensor],
    mut grads: Vec<Tensor>,
) -> Result<()> {
    if let Some(c) = opt.cfg.clip_value {
        clip_by_value(&mut grads, c);
    }
    opt.step(label, params, &grads)
}

/// One discriminator step against gradient-stopped generator samples.
pub fn discriminator_update<R: Rng + ?Sized>(
    d: &mut Discriminator,
    opt: &mut AmsGrad,
    g: &Generator,
    batch: &Batch,
    rng: &mut R,
) -> Result<f64> {
    let z = gaussian_noise(batch.len(), g.noise_dim, rng);
    let fake = g.eval_with_noise(&batch.x, &z)?;
    let tape = Tape::new();
    let bound = d.net.bind(&tape, true);
    let loss = gan_d_loss(d, &bound, &batch.x, &batch.y, &fake)?;
    let value = loss.item()?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("discriminator loss {value}")));
    }
    let grads = gradients(&tape, loss, &bound)?;
    apply_step(opt, "discriminator", d.net.params_mut(), grads)?;
    Ok(value)
}

/// Loss components of one generator step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenLosses {
    pub gan: f64,
    pub aux: Option<f64>,
    pub rec: Option<f64>,
    pub total: f64,
}

/// Settings a generator step reads from the run configuration.
#[derive(Debug, Clone, Copy)]
pub struct GenStepConfig {
    pub k: usize,
    pub lambda_aux: f64,
    pub lambda_rec: f64,
    pub rec_p: u8,
}

impl From<&TrainConfig> for GenStepConfig {
    fn from(cfg: &TrainConfig) -> Self {
        Self {
            k: cfg.k,
            lambda_aux: cfg.lambda_aux(),
            lambda_rec: cfg.lambda_rec,
            rec_p: cfg.rec_p,
        }
    }
}

/// Records the generator objective on `tape` and returns its parts. The
/// discriminator is bound as constants.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss<'t>(
    tape: &'t Tape,
    variant: VariantId,
    g: &Generator,
    bound_g: &[Var<'t>],
    d: &Discriminator,
    predictor: Option<&Predictor>,
    batch: &Batch,
    noise: &[Tensor],
    cfg: &GenStepConfig,
) -> Result<(Var<'t>, ObjectiveParts<'t>)> {
    if variant == VariantId::MleOnly {
        return Err(config("mle_only has no generator update"));
    }
    let prediction = match (variant.is_pmr(), predictor) {
        (true, Some(p)) => Some(p.eval(&batch.x)?),
        (true, None) => {
            return Err(config(format!(
                "variant {variant} requires a trained predictor"
            )))
        }
        (false, _) => None,
    };
    let bound_d = d.net.bind(tape, false);
    let samples = g.samples_with_noise(bound_g, &batch.x, noise)?;
    let y = tape.constant(&batch.y);
    let gan = gan_g_loss(d, &bound_d, &batch.x, &samples)?;
    let aux = aux_loss(variant, &samples, y, prediction.as_ref())?;
    let rec = if cfg.lambda_rec != 0.0 {
        Some(recon_loss_samples(cfg.rec_p, &samples, y)?)
    } else {
        None
    };
    let parts = ObjectiveParts { gan, aux, rec };
    let total = generator_objective(variant, cfg.lambda_aux, cfg.lambda_rec, &parts)?;
    Ok((total, parts))
}

/// One clipped AMSGrad step on the generator only.
#[allow(clippy::too_many_arguments)]
pub fn generator_update<R: Rng + ?Sized>(
    variant: VariantId,
    g: &mut Generator,
    opt: &mut AmsGrad,
    d: &Discriminator,
    predictor: Option<&Predictor>,
    batch: &Batch,
    cfg: &GenStepConfig,
    rng: &mut R,
) -> Result<GenLosses> {
    if variant.needs_multiple_samples() && cfg.k < 2 {
        return Err(config(format!("k must be at least 2 for {variant}")));
    }
    let noise: Vec<Tensor> = (0..cfg.k)
        .map(|_| gaussian_noise(batch.len(), g.noise_dim, rng))
        .collect();
    let tape = Tape::new();
    let bound = g.net.bind(&tape, true);
    let (total, parts) = generator_loss(&tape, variant, g, &bound, d, predictor, batch, &noise, cfg)?;
    let losses = GenLosses {
        gan: parts.gan.item()?,
        aux: parts.aux.map(|v| v.item()).transpose()?,
        rec: parts.rec.map(|v| v.item()).transpose()?,
        total: total.item()?,
    };
    if !losses.total.is_finite() {
        return Err(Error::Numeric(format!("generator loss {}", losses.total)));
    }
    let grads = gradients(&tape, total, &bound)?;
    apply_step(opt, "generator", g.net.params_mut(), grads)?;
    Ok(losses)
}

/// Metrics computed at evaluation points.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalSummary {
    pub modes_captured: Option<usize>,
    pub hq_fraction: Option<f64>,
    pub mean_abs_err: Option<f64>,
    pub var_rel_err: Option<f64>,
    pub sample_variance: Option<f64>,
    pub diversity: Option<f64>,
}

/// Pairs drawn for the unconditional diversity estimate.
const DIVERSITY_SAMPLES: usize = 1000;

/// Evaluates any sampler with the metrics that apply to the dataset.
pub fn evaluate(
    sampler: &dyn Sampler,
    cfg: &TrainConfig,
    rng: &mut dyn RngCore,
) -> Result<EvalSummary> {
    let kind = &cfg.dataset;
    if kind.x_dim() == 0 {
        let x = Tensor::zeros(cfg.eval_samples, 0);
        let ys = sampler.draw(&x, rng)?;
        let mut out = EvalSummary {
            diversity: Some(pairwise_diversity(
                &ys.slice_rows(0, DIVERSITY_SAMPLES.min(ys.rows()))?,
            )?),
            ..EvalSummary::default()
        };
        if let DatasetKind::Ring8 { mode_std, .. } = *kind {
            let cov = mode_coverage(&ys, &kind.centers(), mode_std, cfg.capture_share)?;
            out.modes_captured = Some(cov.modes_captured);
            out.hq_fraction = Some(cov.high_quality_fraction);
        }
        return Ok(out);
    }
    let rep = conditional_moment_error(sampler, kind, &x_grid(cfg.eval_grid), cfg.eval_k, rng)?;
    Ok(EvalSummary {
        mean_abs_err: Some(rep.mean_abs_err),
        var_rel_err: Some(rep.var_rel_err),
        sample_variance: Some(rep.sample_variance),
        diversity: Some(rep.diversity),
        ..EvalSummary::default()
    })
}

/// One row of training history, written at every evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    /// Generator steps completed.
    pub step: usize,
    /// Means over the steps since the previous row.
    pub loss_d: Option<f64>,
    pub loss_g_gan: Option<f64>,
    pub loss_aux: Option<f64>,
    pub loss_rec: Option<f64>,
    pub loss_g_total: Option<f64>,
    pub eval: EvalSummary,
    pub wall_ms: Option<u128>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
    pub predictor_val_curve: Vec<f64>,
    pub predictor_best_epoch: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Models {
    pub generator: Option<Generator>,
    pub discriminator: Option<Discriminator>,
    pub predictor: Option<Predictor>,
}

/// Outcome of a training run. On a numeric failure `abort` holds the error
/// and `models` the parameters from before the failing step.
#[derive(Debug)]
pub struct GanRun {
    pub models: Models,
    pub history: TrainHistory,
    pub abort: Option<Error>,
}

#[derive(Default)]
struct LossAccumulator {
    n_d: usize,
    n_g: usize,
    d: f64,
    gan: f64,
    aux: f64,
    rec: f64,
    total: f64,
    has_aux: bool,
    has_rec: bool,
}

impl LossAccumulator {
    fn add_g(&mut self, l: &GenLosses) {
        self.n_g += 1;
        self.gan += l.gan;
        self.total += l.total;
        if let Some(a) = l.aux {
            self.aux += a;
            self.has_aux = true;
        }
        if let Some(r) = l.rec {
            self.rec += r;
            self.has_rec = true;
        }
    }

    fn row(&self, step: usize, eval: EvalSummary, wall_ms: Option<u128>) -> HistoryRow {
        let mean = |v: f64, n: usize, present: bool| (present && n > 0).then(|| v / n as f64);
        HistoryRow {
            step,
            loss_d: mean(self.d, self.n_d, true),
            loss_g_gan: mean(self.gan, self.n_g, true),
            loss_aux: mean(self.aux, self.n_g, self.has_aux),
            loss_rec: mean(self.rec, self.n_g, self.has_rec),
            loss_g_total: mean(self.total, self.n_g, true),
            eval,
            wall_ms,
        }
    }
}

/// Independent random streams of one run.
pub struct RunRngs {
    pub init: ChaCha8Rng,
    pub train: ChaCha8Rng,
    pub eval: ChaCha8Rng,
}

impl RunRngs {
    pub fn new(seed: u64) -> Self {
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        Self {
            init: stream(1),
            train: stream(2),
            eval: stream(3),
        }
    }
}

/// Runs a full experiment: data, predictor pretraining if the variant needs
/// one, then alternating discriminator and generator updates. `on_row` sees
/// every history row as soon as it is recorded.
pub fn train_gan(cfg: &TrainConfig, mut on_row: impl FnMut(&HistoryRow)) -> Result<GanRun> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let wall = || cfg.record_wall_time.then(|| start.elapsed().as_millis());
    let data = cfg.dataset_spec().generate()?;
    let mut rngs = RunRngs::new(cfg.seed);
    let mut history = TrainHistory::default();

    let predictor = match cfg.predictor_family() {
        Some(family) => {
            let run = train_predictor(&data, family, cfg, &mut rngs.init)?;
            history.predictor_val_curve = run.val_curve;
            history.predictor_best_epoch = Some(run.best_epoch);
            Some(run.predictor)
        }
        None => None,
    };

    if cfg.variant == VariantId::MleOnly {
        let p = predictor.expect("mle_only trains a predictor");
        let eval = evaluate(&p, cfg, &mut rngs.eval)?;
        let row = HistoryRow {
            step: 0,
            loss_d: None,
            loss_g_gan: None,
            loss_aux: history.predictor_val_curve.get(history.predictor_best_epoch.unwrap_or(0)).copied(),
            loss_rec: None,
            loss_g_total: None,
            eval,
            wall_ms: wall(),
        };
        on_row(&row);
        history.rows.push(row);
        return Ok(GanRun {
            models: Models {
                generator: None,
                discriminator: None,
                predictor: Some(p),
            },
            history,
            abort: None,
        });
    }

    let (x_dim, y_dim) = (cfg.dataset.x_dim(), cfg.dataset.y_dim());
    let arch = cfg.arch();
    let mut g = Generator::new(x_dim, cfg.noise_dim, y_dim, &arch, &mut rngs.init)?;
    let mut d = Discriminator::new(x_dim, y_dim, &arch, &mut rngs.init)?;
    let mut g_opt = AmsGrad::new(cfg.optim, g.net.params());
    let mut d_opt = AmsGrad::new(cfg.optim, d.net.params());
    let step_cfg = GenStepConfig::from(cfg);
    let rng = &mut rngs.train;

    let mut acc = LossAccumulator::default();
    let mut step = 0usize;
    let mut abort = None;
    'outer: while step < cfg.steps {
        for _ in 0..cfg.d_steps {
            let batch = data.train.minibatch(cfg.batch_d, rng);
            match discriminator_update(&mut d, &mut d_opt, &g, &batch, rng) {
                Ok(l) => {
                    acc.d += l;
                    acc.n_d += 1;
                }
                Err(e) => {
                    abort = Some(diverged("discriminator step", step, e));
                    break 'outer;
                }
            }
        }
        for _ in 0..cfg.g_steps {
            let batch = data.train.minibatch(cfg.batch_g, rng);
            match generator_update(
                cfg.variant,
                &mut g,
                &mut g_opt,
                &d,
                predictor.as_ref(),
                &batch,
                &step_cfg,
                rng,
            ) {
                Ok(l) => acc.add_g(&l),
                Err(e @ Error::Config(_)) => return Err(e),
                Err(e) => {
                    abort = Some(diverged("generator step", step, e));
                    break 'outer;
                }
            }
            step += 1;
            if step % cfg.eval_interval == 0 || step == cfg.steps {
                let eval = evaluate(&g, cfg, &mut rngs.eval)?;
                let row = acc.row(step, eval, wall());
                on_row(&row);
                history.rows.push(row);
                acc = LossAccumulator::default();
            }
            if step == cfg.steps {
                break;
            }
        }
    }
    Ok(GanRun {
        models: Models {
            generator: Some(g),
            discriminator: Some(d),
            predictor,
        },
        history,
        abort,
    })
}

fn diverged(stage: &'static str, index: usize, e: Error) -> Error {
    match e {
        e @ Error::Diverged { .. } => e,
        other => Error::Diverged {
            stage,
            index,
            detail: other.to_string(),
        },
    }
}
