//! Reconstruction, MLE, moment reconstruction (MR), proxy moment
//! reconstruction (pMR) and GAN losses.
//!
//! Every loss takes tape-recorded generator samples and returns a 1×1 `Var`.
//! Multi-dimensional targets are handled per coordinate: statistics are taken
//! across the `K` samples entry by entry, and the resulting per-entry losses
//! are averaged.

use std::fmt;
use std::str::FromStr;

use crate::error::{config, Error, Result};
use crate::nets::{Discriminator, PredictorOutput, Prediction};
use crate::tensor::{Tape, Tensor, Var};

/// Lower bound applied to every variance or MAD before it is divided by or logged.
pub const DISPERSION_FLOOR: f64 = 1e-6;
/// Discriminator outputs are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before `log`.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    /// Mean and variance.
    Gaussian,
    /// Median and mean absolute deviation.
    Laplace,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Gaussian => "gaussian",
            Family::Laplace => "laplace",
        })
    }
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gaussian" => Ok(Family::Gaussian),
            "laplace" => Ok(Family::Laplace),
            other => Err(format!("unknown family `{other}`")),
        }
    }
}

/// How many moments an MR or pMR loss matches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Moments {
    One,
    Two,
}

/// A (location, dispersion) pair on the tape.
#[derive(Debug, Clone, Copy)]
pub struct MomentEstimate<'t> {
    pub family: Family,
    pub location: Var<'t>,
    pub dispersion: Var<'t>,
}

impl<'t> MomentEstimate<'t> {
    /// Builds an estimate, flooring the dispersion.
    pub fn new(family: Family, location: Var<'t>, dispersion: Var<'t>) -> Result<Self> {
        if location.shape() != dispersion.shape() {
            return Err(Error::Shape(format!(
                "location {:?} vs dispersion {:?}",
                location.shape(),
                dispersion.shape()
            )));
        }
        Ok(Self {
            family,
            location,
            dispersion: floor_dispersion(dispersion),
        })
    }

    pub fn from_predictor(out: &PredictorOutput<'t>) -> Result<Self> {
        Self::new(out.family, out.location, out.dispersion())
    }

    /// Constant estimate from predicted values.
    pub fn from_prediction(tape: &'t Tape, pred: &Prediction) -> Result<Self> {
        Self::new(
            pred.family,
            tape.constant(&pred.location),
            tape.constant(&pred.dispersion),
        )
    }
}

fn floor_dispersion(v: Var<'_>) -> Var<'_> {
    v.clamp(DISPERSION_FLOOR, f64::INFINITY)
}

/// The twelve generator objectives: three baselines, the MLE predictor alone,
/// and the eight MR / pMR variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VariantId {
    GanOnly,
    GanL1,
    GanL2,
    MleOnly,
    GMr1,
    GMr2,
    LMr1,
    LMr2,
    GPmr1,
    GPmr2,
    LPmr1,
    LPmr2,
}

impl VariantId {
    pub const ALL: [VariantId; 12] = [
        VariantId::GanOnly,
        VariantId::GanL1,
        VariantId::GanL2,
        VariantId::MleOnly,
        VariantId::GMr1,
        VariantId::GMr2,
        VariantId::LMr1,
        VariantId::LMr2,
        VariantId::GPmr1,
        VariantId::GPmr2,
        VariantId::LPmr1,
        VariantId::LPmr2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantId::GanOnly => "gan_only",
            VariantId::GanL1 => "gan_l1",
            VariantId::GanL2 => "gan_l2",
            VariantId::MleOnly => "mle_only",
            VariantId::GMr1 => "g_mr1",
            VariantId::GMr2 => "g_mr2",
            VariantId::LMr1 => "l_mr1",
            VariantId::LMr2 => "l_mr2",
            VariantId::GPmr1 => "g_pmr1",
            VariantId::GPmr2 => "g_pmr2",
            VariantId::LPmr1 => "l_pmr1",
            VariantId::LPmr2 => "l_pmr2",
        }
    }

    /// Distribution family of the statistics the variant matches, if any.
    pub fn family(self) -> Option<Family> {
        use VariantId::*;
        match self {
            GMr1 | GMr2 | GPmr1 | GPmr2 | MleOnly => Some(Family::Gaussian),
            LMr1 | LMr2 | LPmr1 | LPmr2 => Some(Family::Laplace),
            GanOnly | GanL1 | GanL2 => None,
        }
    }

    pub fn moments(self) -> Option<Moments> {
        use VariantId::*;
        match self {
            GMr1 | LMr1 | GPmr1 | LPmr1 => Some(Moments::One),
            GMr2 | LMr2 | GPmr2 | LPmr2 => Some(Moments::Two),
            _ => None,
        }
    }

    pub fn is_mr(self) -> bool {
        use VariantId::*;
        matches!(self, GMr1 | GMr2 | LMr1 | LMr2)
    }

    pub fn is_pmr(self) -> bool {
        use VariantId::*;
        matches!(self, GPmr1 | GPmr2 | LPmr1 | LPmr2)
    }

    /// Whether a pretrained predictor is part of the run.
    pub fn needs_predictor(self) -> bool {
        self.is_pmr() || self == VariantId::MleOnly
    }

    /// Whether the variant's auxiliary loss needs `K >= 2` samples per input.
    pub fn needs_multiple_samples(self) -> bool {
        self.is_mr() || self.is_pmr()
    }
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let lower = s.to_ascii_lowercase();
        VariantId::ALL
            .into_iter()
            .find(|v| v.name() == lower)
            .ok_or_else(|| format!("unknown variant `{s}`"))
    }
}

fn check_same_shape(a: Var<'_>, b: Var<'_>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_finite(v: Var<'_>, what: &str) -> Result<()> {
    if v.value_ref().all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains non-finite values")))
    }
}

fn check_k(samples: &[Var<'_>]) -> Result<()> {
    if samples.len() < 2 {
        return Err(config(format!(
            "sample statistics need K >= 2, got {}",
            samples.len()
        )));
    }
    let shape = samples[0].shape();
    if samples.iter().any(|s| s.shape() != shape) {
        return Err(Error::Shape("samples differ in shape".into()));
    }
    Ok(())
}

/// `mean |y - ŷ|^p` for `p` in {1, 2}.
pub fn recon_loss<'t>(p: u8, y_hat: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
    check_same_shape(y_hat, y, "recon_loss")?;
    let diff = y.sub(y_hat)?;
    let per_entry = match p {
        1 => diff.abs(),
        2 => diff.square(),
        _ => return Err(config(format!("reconstruction norm must be 1 or 2, got {p}"))),
    };
    Ok(per_entry.mean()?)
}

/// Reconstruction loss averaged over `K` samples of the same inputs.
pub fn recon_loss_samples<'t>(p: u8, samples: &[Var<'t>], y: Var<'t>) -> Result<Var<'t>> {
    let first = samples
        .first()
        .ok_or_else(|| config("reconstruction loss needs at least one sample"))?;
    let tape = first.tape();
    let terms = samples
        .iter()
        .map(|&s| recon_loss(p, s, y))
        .collect::<Result<Vec<_>>>()?;
    Ok(tape.add_all(&terms)?.scale(1.0 / samples.len() as f64))
}

/// `mean (y - μ)² / (2σ²) + ½ log σ²`.
pub fn gaussian_mle_loss<'t>(est: &MomentEstimate<'t>, y: Var<'t>) -> Result<Var<'t>> {
    if est.family != Family::Gaussian {
        return Err(config("gaussian_mle_loss needs a Gaussian estimate"));
    }
    check_same_shape(est.location, y, "gaussian_mle_loss")?;
    check_finite(y, "target")?;
    check_finite(est.location, "location")?;
    check_finite(est.dispersion, "dispersion")?;
    let fit = y
        .sub(est.location)?
        .square()
        .div(est.dispersion.scale(2.0))?;
    let norm = est.dispersion.log()?.scale(0.5);
    Ok(fit.add(norm)?.mean()?)
}

/// `mean |y - m| / b + log b`.
pub fn laplace_mle_loss<'t>(est: &MomentEstimate<'t>, y: Var<'t>) -> Result<Var<'t>> {
    if est.family != Family::Laplace {
        return Err(config("laplace_mle_loss needs a Laplace estimate"));
    }
    check_same_shape(est.location, y, "laplace_mle_loss")?;
    check_finite(y, "target")?;
    check_finite(est.location, "location")?;
    check_finite(est.dispersion, "dispersion")?;
    let fit = y.sub(est.location)?.abs().div(est.dispersion)?;
    Ok(fit.add(est.dispersion.log()?)?.mean()?)
}

pub fn mle_loss<'t>(est: &MomentEstimate<'t>, y: Var<'t>) -> Result<Var<'t>> {
    match est.family {
        Family::Gaussian => gaussian_mle_loss(est, y),
        Family::Laplace => laplace_mle_loss(est, y),
    }
}

/// Sample mean and unbiased sample variance across `K` samples.
pub fn sample_mean_var<'t>(samples: &[Var<'t>]) -> Result<MomentEstimate<'t>> {
    check_k(samples)?;
    let tape = samples[0].tape();
    let k = samples.len() as f64;
    let mean = tape.add_all(samples)?.scale(1.0 / k);
    let sq = samples
        .iter()
        .map(|&s| Ok(s.sub(mean)?.square()))
        .collect::<Result<Vec<_>>>()?;
    let var = tape.add_all(&sq)?.scale(1.0 / (k - 1.0));
    MomentEstimate::new(Family::Gaussian, mean, var)
}

/// Sample median and mean absolute deviation around it, across `K` samples.
pub fn sample_median_mad<'t>(samples: &[Var<'t>]) -> Result<MomentEstimate<'t>> {
    check_k(samples)?;
    let tape = samples[0].tape();
    let median = tape.median(samples)?;
    let dev = samples
        .iter()
        .map(|&s| Ok(s.sub(median)?.abs()))
        .collect::<Result<Vec<_>>>()?;
    let mad = tape.add_all(&dev)?.scale(1.0 / samples.len() as f64);
    MomentEstimate::new(Family::Laplace, median, mad)
}

/// Gaussian MR loss: `(y - μ̃)²` or `(y - μ̃)²/(2σ̃²) + ½ log σ̃²`.
pub fn mr_loss_gaussian<'t>(moments: Moments, samples: &[Var<'t>], y: Var<'t>) -> Result<Var<'t>> {
    let est = sample_mean_var(samples)?;
    check_same_shape(est.location, y, "mr_loss_gaussian")?;
    match moments {
        Moments::One => Ok(y.sub(est.location)?.square().mean()?),
        Moments::Two => gaussian_mle_loss(&est, y),
    }
}

/// Targets `t_i = stop(ỹ_i + shift)`: every sample is pulled by the same
/// offset, so the gradient reaches all `K` samples instead of only the median.
fn shifted_targets<'t>(samples: &[Var<'t>], shift: Var<'t>) -> Result<Vec<Var<'t>>> {
    samples
        .iter()
        .map(|&s| Ok(s.add(shift)?.gradient_stop()))
        .collect()
}

fn mean_over_samples<'t>(tape: &'t Tape, terms: Vec<Var<'t>>) -> Result<Var<'t>> {
    let k = terms.len() as f64;
    Ok(tape.add_all(&terms)?.scale(1.0 / k))
}

/// Laplace MR loss with shifted targets `t_i = stop(ỹ_i + (y - m̃))`:
/// `(1/K) Σ |t_i - ỹ_i|`, or with two moments
/// `(1/K) Σ |t_i - ỹ_i| / b̃ + log b̃` (b̃ stays differentiable).
pub fn mr_loss_laplace<'t>(moments: Moments, samples: &[Var<'t>], y: Var<'t>) -> Result<Var<'t>> {
    let est = sample_median_mad(samples)?;
    check_same_shape(est.location, y, "mr_loss_laplace")?;
    let tape = y.tape();
    let targets = shifted_targets(samples, y.sub(est.location)?)?;
    let abs_terms = samples
        .iter()
        .zip(&targets)
        .map(|(&s, &t)| Ok(t.sub(s)?.abs()))
        .collect::<Result<Vec<_>>>()?;
    let fit = mean_over_samples(tape, abs_terms)?;
    match moments {
        Moments::One => Ok(fit.mean()?),
        Moments::Two => Ok(fit
            .div(est.dispersion)?
            .add(est.dispersion.log()?)?
            .mean()?),
    }
}

fn check_prediction(pred: &Prediction, family: Family, like: Var<'_>) -> Result<()> {
    if pred.family != family {
        return Err(config(format!(
            "{family} proxy loss given a {} predictor",
            pred.family
        )));
    }
    if pred.location.shape() != like.shape() || pred.dispersion.shape() != like.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs samples {:?}",
            pred.location.shape(),
            like.shape()
        )));
    }
    Ok(())
}

/// Gaussian proxy MR loss against frozen predictions:
/// `(μ̂ - μ̃)²`, plus `(σ̂² - σ̃²)²` with two moments.
pub fn pmr_loss_gaussian<'t>(
    moments: Moments,
    samples: &[Var<'t>],
    pred: &Prediction,
) -> Result<Var<'t>> {
    let est = sample_mean_var(samples)?;
    check_prediction(pred, Family::Gaussian, est.location)?;
    let tape = est.location.tape();
    let mu_hat = tape.constant(&pred.location);
    let mean_term = mu_hat.sub(est.location)?.square().mean()?;
    match moments {
        Moments::One => Ok(mean_term),
        Moments::Two => {
            let var_hat = floor_dispersion(tape.constant(&pred.dispersion));
            let var_term = var_hat.sub(est.dispersion)?.square().mean()?;
            Ok(mean_term.add(var_term)?)
        }
    }
}

/// Laplace proxy MR loss with shifted targets `t_i = stop(ỹ_i + (m̂ - m̃))`:
/// `(1/K) Σ (t_i - ỹ_i)²`, plus `(b̂ - b̃)²` with two moments.
pub fn pmr_loss_laplace<'t>(
    moments: Moments,
    samples: &[Var<'t>],
    pred: &Prediction,
) -> Result<Var<'t>> {
    let est = sample_median_mad(samples)?;
    check_prediction(pred, Family::Laplace, est.location)?;
    let tape = est.location.tape();
    let m_hat = tape.constant(&pred.location);
    let targets = shifted_targets(samples, m_hat.sub(est.location)?)?;
    let sq_terms = samples
        .iter()
        .zip(&targets)
        .map(|(&s, &t)| Ok(t.sub(s)?.square()))
        .collect::<Result<Vec<_>>>()?;
    let median_term = mean_over_samples(tape, sq_terms)?.mean()?;
    match moments {
        Moments::One => Ok(median_term),
        Moments::Two => {
            let b_hat = floor_dispersion(tape.constant(&pred.dispersion));
            let mad_term = b_hat.sub(est.dispersion)?.square().mean()?;
            Ok(median_term.add(mad_term)?)
        }
    }
}

fn clamped_log<'t>(p: Var<'t>) -> Result<Var<'t>> {
    Ok(p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).log()?)
}

/// Discriminator loss `-mean log D(x, y) - mean log(1 - D(x, ỹ))`.
/// `bound` must be the discriminator's parameters on the tape; `y_fake` is a
/// plain tensor and therefore carries no gradient to the generator.
pub fn gan_d_loss<'t>(
    d: &Discriminator,
    bound: &[Var<'t>],
    x: &Tensor,
    y_real: &Tensor,
    y_fake: &Tensor,
) -> Result<Var<'t>> {
    let tape = bound
        .first()
        .ok_or_else(|| Error::Shape("discriminator has no parameters bound".into()))?
        .tape();
    let xv = tape.constant(x);
    let real = d.forward(bound, xv, tape.constant(y_real))?;
    let fake = d.forward(bound, xv, tape.constant(y_fake))?;
    let real_term = clamped_log(real)?.mean()?;
    let fake_term = clamped_log(fake.rsub_scalar(1.0))?.mean()?;
    Ok(real_term.add(fake_term)?.neg())
}

/// Non-saturating generator loss `(1/K) Σ_i -log D(x, ỹ_i)`, averaged over
/// the batch rows.
pub fn gan_g_loss<'t>(
    d: &Discriminator,
    bound: &[Var<'t>],
    x: &Tensor,
    samples: &[Var<'t>],
) -> Result<Var<'t>> {
    let first = samples
        .first()
        .ok_or_else(|| config("GAN loss needs at least one sample"))?;
    let tape = first.tape();
    let ys = tape.stack_rows(samples)?;
    let xs = tape.constant_owned(x.repeat_rows(samples.len()));
    let p = d.forward(bound, xs, ys)?;
    Ok(clamped_log(p)?.mean()?.neg())
}

/// The variant-specific auxiliary loss. Baselines `GanL1` / `GanL2` use the
/// reconstruction loss itself; `GanOnly` has none.
pub fn aux_loss<'t>(
    variant: VariantId,
    samples: &[Var<'t>],
    y: Var<'t>,
    prediction: Option<&Prediction>,
) -> Result<Option<Var<'t>>> {
    use VariantId::*;
    let need_pred = || {
        prediction.ok_or_else(|| config(format!("variant {variant} requires a trained predictor")))
    };
    Ok(Some(match variant {
        GanOnly => return Ok(None),
        MleOnly => {
            return Err(config(
                "mle_only trains the predictor alone and has no generator objective",
            ))
        }
        GanL1 => recon_loss_samples(1, samples, y)?,
        GanL2 => recon_loss_samples(2, samples, y)?,
        GMr1 => mr_loss_gaussian(Moments::One, samples, y)?,
        GMr2 => mr_loss_gaussian(Moments::Two, samples, y)?,
        LMr1 => mr_loss_laplace(Moments::One, samples, y)?,
        LMr2 => mr_loss_laplace(Moments::Two, samples, y)?,
        GPmr1 => pmr_loss_gaussian(Moments::One, samples, need_pred()?)?,
        GPmr2 => pmr_loss_gaussian(Moments::Two, samples, need_pred()?)?,
        LPmr1 => pmr_loss_laplace(Moments::One, samples, need_pred()?)?,
        LPmr2 => pmr_loss_laplace(Moments::Two, samples, need_pred()?)?,
    }))
}

/// Loss components of one generator update.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveParts<'t> {
    pub gan: Var<'t>,
    pub aux: Option<Var<'t>>,
    pub rec: Option<Var<'t>>,
}

/// `L_GAN + λ_aux·L_aux + λ_rec·L_rec`; the GAN weight is fixed to 1.
pub fn generator_objective<'t>(
    variant: VariantId,
    lambda_aux: f64,
    lambda_rec: f64,
    parts: &ObjectiveParts<'t>,
) -> Result<Var<'t>> {
    let mut total = parts.gan;
    match (variant, parts.aux) {
        (VariantId::GanOnly, _) => {}
        (_, Some(aux)) => total = total.add(aux.scale(lambda_aux))?,
        (_, None) => {
            return Err(config(format!(
                "variant {variant} requires an auxiliary loss term"
            )))
        }
    }
    if let Some(rec) = parts.rec {
        total = total.add(rec.scale(lambda_rec))?;
    } else if lambda_rec != 0.0 {
        return Err(config("lambda_rec is nonzero but no reconstruction term was given"));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ArchSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-12;

    fn scalars<'t>(tape: &'t Tape, vals: &[f64]) -> Vec<Var<'t>> {
        vals.iter().map(|&v| tape.param(&Tensor::scalar(v))).collect()
    }

    fn close(a: f64, b: f64) {
        assert!((a - b).abs() < TOL, "{a} vs {b}");
    }

    #[test]
    fn recon_examples() {
        let t = Tape::new();
        let y = t.constant(&Tensor::row(vec![1.0, -1.0]));
        assert_eq!(recon_loss(2, y, y).unwrap().item().unwrap(), 0.0);
        let zero = t.constant(&Tensor::row(vec![0.0, 0.0]));
        assert_eq!(recon_loss(1, zero, y).unwrap().item().unwrap(), 1.0);
        let a = t.constant(&Tensor::row(vec![0.0]));
        let b = t.constant(&Tensor::row(vec![2.0]));
        assert_eq!(recon_loss(2, a, b).unwrap().item().unwrap(), 4.0);
        assert!(recon_loss(2, a, y).is_err());
        assert!(recon_loss(3, a, b).is_err());
    }

    fn gaussian_est<'t>(t: &'t Tape, mu: f64, var: f64) -> MomentEstimate<'t> {
        MomentEstimate::new(
            Family::Gaussian,
            t.constant(&Tensor::scalar(mu)),
            t.constant(&Tensor::scalar(var)),
        )
        .unwrap()
    }

    #[test]
    fn gaussian_mle_examples() {
        let t = Tape::new();
        let y = t.constant(&Tensor::scalar(1.0));
        close(gaussian_mle_loss(&gaussian_est(&t, 1.0, 1.0), y).unwrap().item().unwrap(), 0.0);
        close(gaussian_mle_loss(&gaussian_est(&t, 0.0, 1.0), y).unwrap().item().unwrap(), 0.5);
        let nan = t.constant(&Tensor::scalar(f64::NAN));
        assert!(matches!(
            gaussian_mle_loss(&gaussian_est(&t, 0.0, 1.0), nan),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn gaussian_mle_minimized_at_sample_moments() {
        // targets {0, 2}: closed form μ = 1, σ² = 1 (biased variance)
        let loss_at = |mu: f64, var: f64| {
            let t = Tape::new();
            let y = t.constant(&Tensor::row(vec![0.0, 2.0]));
            let est = MomentEstimate::new(
                Family::Gaussian,
                t.constant(&Tensor::row(vec![mu, mu])),
                t.constant(&Tensor::row(vec![var, var])),
            )
            .unwrap();
            gaussian_mle_loss(&est, y).unwrap().item().unwrap()
        };
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..=200 {
            for j in 1..=300 {
                let (mu, var) = (i as f64 * 0.01, j as f64 * 0.01);
                let l = loss_at(mu, var);
                if l < best.0 {
                    best = (l, mu, var);
                }
            }
        }
        assert!((best.1 - 1.0).abs() < 1e-9 && (best.2 - 1.0).abs() < 1e-9, "{best:?}");
    }

    #[test]
    fn laplace_mle_examples() {
        let t = Tape::new();
        let est = |m: f64, b: f64| {
            MomentEstimate::new(
                Family::Laplace,
                t.constant(&Tensor::scalar(m)),
                t.constant(&Tensor::scalar(b)),
            )
            .unwrap()
        };
        let y0 = t.constant(&Tensor::scalar(0.0));
        close(laplace_mle_loss(&est(0.0, 1.0), y0).unwrap().item().unwrap(), 0.0);
        let y2 = t.constant(&Tensor::scalar(2.0));
        close(laplace_mle_loss(&est(0.0, 1.0), y2).unwrap().item().unwrap(), 2.0);
        assert!(laplace_mle_loss(&gaussian_est(&t, 0.0, 1.0), y2).is_err());
        // r/b + log b is stationary at b = |r|
        let r = 0.7;
        let f = |b: f64| r / b + b.ln();
        let best = (1..5000)
            .map(|i| i as f64 * 1e-3)
            .min_by(|a, b| f(*a).total_cmp(&f(*b)))
            .unwrap();
        assert!((best - r).abs() < 1e-3);
        let t2 = Tape::new();
        let b = t2.param(&Tensor::scalar(r));
        let e = MomentEstimate::new(Family::Laplace, t2.constant(&Tensor::scalar(0.0)), b).unwrap();
        let loss = laplace_mle_loss(&e, t2.constant(&Tensor::scalar(r))).unwrap();
        let g = t2.backward(loss).unwrap();
        assert!(g.wrt(b).data()[0].abs() < 1e-12);
    }

    #[test]
    fn sample_mean_var_examples() {
        let t = Tape::new();
        let est = sample_mean_var(&scalars(&t, &[1.0, 2.0, 3.0])).unwrap();
        close(est.location.item().unwrap(), 2.0);
        close(est.dispersion.item().unwrap(), 1.0);
        let a = 0.8;
        let est = sample_mean_var(&scalars(&t, &[-a, a])).unwrap();
        close(est.location.item().unwrap(), 0.0);
        close(est.dispersion.item().unwrap(), 2.0 * a * a);
        let est = sample_mean_var(&scalars(&t, &[0.3, 0.3, 0.3])).unwrap();
        assert_eq!(est.dispersion.item().unwrap(), DISPERSION_FLOOR);
        assert!(matches!(sample_mean_var(&scalars(&t, &[1.0])), Err(Error::Config(_))));
    }

    #[test]
    fn sample_median_mad_examples() {
        let t = Tape::new();
        let est = sample_median_mad(&scalars(&t, &[1.0, 2.0, 4.0])).unwrap();
        close(est.location.item().unwrap(), 2.0);
        close(est.dispersion.item().unwrap(), 1.0);
        let est = sample_median_mad(&scalars(&t, &[1.0, 3.0])).unwrap();
        close(est.location.item().unwrap(), 2.0);
        close(est.dispersion.item().unwrap(), 1.0);
        let est = sample_median_mad(&scalars(&t, &[5.0, 5.0, 5.0, 5.0])).unwrap();
        assert_eq!(est.dispersion.item().unwrap(), DISPERSION_FLOOR);
        assert!(sample_median_mad(&[]).is_err());
    }

    #[test]
    fn mr_gaussian_examples() {
        let t = Tape::new();
        let s = scalars(&t, &[1.0, 2.0, 3.0]);
        let y = t.constant(&Tensor::scalar(2.0));
        close(mr_loss_gaussian(Moments::One, &s, y).unwrap().item().unwrap(), 0.0);
        close(mr_loss_gaussian(Moments::Two, &s, y).unwrap().item().unwrap(), 0.0);
        let eps = 1e-4;
        let s = scalars(&t, &[0.0, eps]);
        let y = t.constant(&Tensor::scalar(5.0));
        let v = mr_loss_gaussian(Moments::One, &s, y).unwrap().item().unwrap();
        close(v, (5.0 - eps / 2.0).powi(2));
        assert!((v - 25.0).abs() < 1e-3);
    }

    #[test]
    fn mr_laplace_example_and_gradients() {
        let t = Tape::new();
        let s = scalars(&t, &[1.0, 2.0, 4.0]);
        let y = t.constant(&Tensor::scalar(3.0));
        let loss = mr_loss_laplace(Moments::One, &s, y).unwrap();
        close(loss.item().unwrap(), 1.0);
        let g = t.backward(loss).unwrap();
        // t_i - ỹ_i = y - m̃ = 1 > 0, so each sample sees -1/K
        for v in &s {
            close(g.wrt(*v).data()[0], -1.0 / 3.0);
        }

        let t = Tape::new();
        let s = scalars(&t, &[1.0, 2.0, 4.0]);
        let y = t.constant(&Tensor::scalar(2.0));
        close(mr_loss_laplace(Moments::One, &s, y).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn mr_laplace_two_moments_value() {
        // {1,2,4}, y=3: m̃=2, b̃=1 -> 1/1 + log 1 = 1
        let t = Tape::new();
        let s = scalars(&t, &[1.0, 2.0, 4.0]);
        let y = t.constant(&Tensor::scalar(3.0));
        close(mr_loss_laplace(Moments::Two, &s, y).unwrap().item().unwrap(), 1.0);
    }

    fn pred(family: Family, loc: f64, disp: f64) -> Prediction {
        Prediction {
            family,
            location: Tensor::scalar(loc),
            dispersion: Tensor::scalar(disp),
        }
    }

    #[test]
    fn pmr_gaussian_examples() {
        let t = Tape::new();
        let s = scalars(&t, &[1.0, 2.0, 3.0]);
        let exact = pred(Family::Gaussian, 2.0, 1.0);
        close(pmr_loss_gaussian(Moments::Two, &s, &exact).unwrap().item().unwrap(), 0.0);
        let eps = 1e-4;
        let s2 = scalars(&t, &[0.0, eps]);
        let v = pmr_loss_gaussian(Moments::One, &s2, &pred(Family::Gaussian, 1.0, 1.0))
            .unwrap()
            .item()
            .unwrap();
        assert!((v - 1.0).abs() < 1e-3);
        let v = pmr_loss_gaussian(Moments::Two, &s, &pred(Family::Gaussian, 2.0, 2.0))
            .unwrap()
            .item()
            .unwrap();
        close(v, 1.0);
        assert!(matches!(
            pmr_loss_gaussian(Moments::One, &s, &pred(Family::Laplace, 2.0, 1.0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pmr_laplace_examples() {
        let t = Tape::new();
        let s = scalars(&t, &[1.0, 2.0, 4.0]);
        close(
            pmr_loss_laplace(Moments::One, &s, &pred(Family::Laplace, 2.0, 1.0))
                .unwrap()
                .item()
                .unwrap(),
            0.0,
        );
        close(
            pmr_loss_laplace(Moments::One, &s, &pred(Family::Laplace, 3.0, 1.0))
                .unwrap()
                .item()
                .unwrap(),
            1.0,
        );
        // extra (b̂ - b̃)² with b̂ = 2, b̃ = 1
        close(
            pmr_loss_laplace(Moments::Two, &s, &pred(Family::Laplace, 3.0, 2.0))
                .unwrap()
                .item()
                .unwrap(),
            2.0,
        );
    }

    fn half_discriminator(x_dim: usize, y_dim: usize) -> Discriminator {
        let mut d = Discriminator::new(
            x_dim,
            y_dim,
            &ArchSpec {
                hidden: vec![4],
                ..ArchSpec::default()
            },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        for p in d.net.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        d
    }

    #[test]
    fn gan_losses_at_symmetric_point() {
        let d = half_discriminator(1, 1);
        let t = Tape::new();
        let bound = d.net.bind(&t, true);
        let x = Tensor::col(vec![0.1, 0.2]);
        let y = Tensor::col(vec![1.0, -1.0]);
        let ld = gan_d_loss(&d, &bound, &x, &y, &y).unwrap();
        close(ld.item().unwrap(), 2.0 * 2f64.ln());

        let t = Tape::new();
        let bound = d.net.bind(&t, false);
        let s = t.param(&y);
        let lg = gan_g_loss(&d, &bound, &x, &[s, s, s]).unwrap();
        close(lg.item().unwrap(), 2f64.ln());
        let lg1 = gan_g_loss(&d, &bound, &x, &[s]).unwrap();
        close(lg1.item().unwrap(), lg.item().unwrap());
    }

    #[test]
    fn gan_losses_limits() {
        let mut d = half_discriminator(0, 1);
        // D(y) = sigmoid(big * y): real y = +1 -> ~1, fake y = -1 -> ~0
        let n = d.net.params().len();
        d.net.params_mut()[n - 1].data_mut()[0] = 0.0;
        d.net.params_mut()[0].data_mut().iter_mut().for_each(|v| *v = 1.0);
        d.net.params_mut()[n - 2].data_mut().iter_mut().for_each(|v| *v = 100.0);
        let t = Tape::new();
        let bound = d.net.bind(&t, true);
        let x = Tensor::zeros(1, 0);
        let ld = gan_d_loss(&d, &bound, &x, &Tensor::scalar(1.0), &Tensor::scalar(-1.0)).unwrap();
        assert!(ld.item().unwrap() < 1e-6);
        let s = t.param(&Tensor::scalar(1.0));
        let lg = gan_g_loss(&d, &bound, &x, &[s]).unwrap();
        assert!(lg.item().unwrap() < 1e-6);
    }

    #[test]
    fn objective_weights() {
        let t = Tape::new();
        let parts = ObjectiveParts {
            gan: t.scalar(0.7),
            aux: Some(t.scalar(0.2)),
            rec: Some(t.scalar(0.05)),
        };
        let only = generator_objective(VariantId::GanOnly, 10.0, 0.0, &ObjectiveParts { rec: None, ..parts }).unwrap();
        close(only.item().unwrap(), 0.7);
        let pmr = generator_objective(VariantId::GPmr2, 10.0, 0.0, &parts).unwrap();
        close(pmr.item().unwrap(), 0.7 + 10.0 * 0.2);
        let sweep = generator_objective(VariantId::GPmr2, 10.0, 100.0, &parts).unwrap();
        close(sweep.item().unwrap(), 0.7 + 10.0 * 0.2 + 100.0 * 0.05);
        let zero_aux = generator_objective(VariantId::GMr1, 0.0, 0.0, &parts).unwrap();
        assert_eq!(zero_aux.item().unwrap(), 0.7);
        let missing = ObjectiveParts { aux: None, ..parts };
        assert!(generator_objective(VariantId::GMr1, 10.0, 0.0, &missing).is_err());
    }

    #[test]
    fn pmr_variant_without_predictor_is_config_error() {
        let t = Tape::new();
        let s = scalars(&t, &[1.0, 2.0]);
        let y = t.constant(&Tensor::scalar(1.0));
        for v in [VariantId::GPmr1, VariantId::GPmr2, VariantId::LPmr1, VariantId::LPmr2] {
            assert!(matches!(aux_loss(v, &s, y, None), Err(Error::Config(_))));
        }
        assert!(aux_loss(VariantId::GanOnly, &s, y, None).unwrap().is_none());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in VariantId::ALL {
            assert_eq!(v.name().parse::<VariantId>().unwrap(), v);
        }
        assert_eq!("G_PMR2".parse::<VariantId>().unwrap(), VariantId::GPmr2);
        assert!("bogus".parse::<VariantId>().is_err());
    }
}
