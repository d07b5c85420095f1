//! Evaluation metrics: ring mode coverage, conditional moment errors against
//! closed forms, pairwise diversity, the squared-error decomposition and a
//! brute-force ℓ1 minimizer scan.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::data::DatasetKind;
use crate::error::{config, Error, Result};
use crate::losses::Family;
use crate::nets::{Generator, Prediction, Predictor};
use crate::tensor::Tensor;

/// Anything that draws one `y` per row of `x`.
pub trait Sampler {
    fn draw(&self, x: &Tensor, rng: &mut dyn RngCore) -> Result<Tensor>;
}

impl Sampler for Generator {
    fn draw(&self, x: &Tensor, rng: &mut dyn RngCore) -> Result<Tensor> {
        self.sample(x, rng)
    }
}

/// Samples from the distribution a trained predictor describes:
/// `N(μ̂, σ̂²)` or `Laplace(m̂, b̂)`.
impl Sampler for Predictor {
    fn draw(&self, x: &Tensor, rng: &mut dyn RngCore) -> Result<Tensor> {
        let pred = self.eval(x)?;
        Ok(sample_prediction(&pred, rng))
    }
}

pub fn sample_prediction(pred: &Prediction, rng: &mut dyn RngCore) -> Tensor {
    let (rows, cols) = pred.location.shape();
    let data = pred
        .location
        .data()
        .iter()
        .zip(pred.dispersion.data())
        .map(|(&loc, &disp)| match pred.family {
            Family::Gaussian => {
                let z: f64 = StandardNormal.sample(rng);
                loc + disp.sqrt() * z
            }
            Family::Laplace => {
                let e: f64 = Exp1.sample(rng);
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                loc + sign * disp * e
            }
        })
        .collect();
    Tensor::new(rows, cols, data).expect("prediction shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeCoverageReport {
    pub modes_captured: usize,
    /// Share of all samples assigned to each center and within `3·mode_std` of it.
    pub mode_shares: Vec<f64>,
    pub high_quality_fraction: f64,
}

pub const MIN_COVERAGE_SAMPLES: usize = 1000;

/// Assigns each 2D sample to its nearest center; a mode counts as captured
/// when at least `capture_share` of all samples land within `3·mode_std` of it.
pub fn mode_coverage(
    samples: &Tensor,
    centers: &[[f64; 2]],
    mode_std: f64,
    capture_share: f64,
) -> Result<ModeCoverageReport> {
    if samples.cols() != 2 {
        return Err(Error::Shape(format!(
            "mode coverage needs 2D samples, got {} columns",
            samples.cols()
        )));
    }
    if samples.rows() < MIN_COVERAGE_SAMPLES {
        return Err(config(format!(
            "mode coverage needs at least {MIN_COVERAGE_SAMPLES} samples, got {}",
            samples.rows()
        )));
    }
    if centers.is_empty() {
        return Err(config("mode coverage needs at least one center"));
    }
    let radius = 3.0 * mode_std;
    let mut close = vec![0usize; centers.len()];
    for r in 0..samples.rows() {
        let p = samples.row_slice(r);
        let (k, d2) = centers
            .iter()
            .enumerate()
            .map(|(k, c)| (k, (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
        if d2.sqrt() <= radius {
            close[k] += 1;
        }
    }
    let n = samples.rows() as f64;
    let mode_shares: Vec<f64> = close.iter().map(|&c| c as f64 / n).collect();
    Ok(ModeCoverageReport {
        modes_captured: mode_shares.iter().filter(|&&s| s >= capture_share).count(),
        high_quality_fraction: close.iter().sum::<usize>() as f64 / n,
        mode_shares,
    })
}

/// Mean Euclidean distance over all unordered pairs of rows.
pub fn pairwise_diversity(samples: &Tensor) -> Result<f64> {
    let k = samples.rows();
    if k < 2 {
        return Err(config(format!("diversity needs at least 2 samples, got {k}")));
    }
    let mut total = 0.0;
    for i in 0..k {
        let a = samples.row_slice(i);
        for j in i + 1..k {
            let b = samples.row_slice(j);
            total += a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
        }
    }
    Ok(total / (k * (k - 1) / 2) as f64)
}

/// Grid averages of per-coordinate errors between sample statistics and
/// closed-form conditional moments.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentErrorReport {
    pub mean_abs_err: f64,
    pub var_rel_err: f64,
    /// Distance from the sample median to the analytic median interval.
    pub median_err: f64,
    pub mad_rel_err: f64,
    /// Grid average of the unbiased sample variance.
    pub sample_variance: f64,
    /// Grid average of the pairwise diversity of the samples at each `x`.
    pub diversity: f64,
}

/// `n` evenly spaced points covering `[-1, 1]`.
pub fn x_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Summary statistics of one column of samples.
struct ColumnStats {
    mean: f64,
    var: f64,
    median: f64,
    mad: f64,
}

fn column_stats(v: &mut [f64]) -> ColumnStats {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    let median = if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    };
    let mad = v.iter().map(|a| (a - median).abs()).sum::<f64>() / n;
    ColumnStats {
        mean,
        var,
        median,
        mad,
    }
}

/// Draws `k_eval` samples at every grid `x` and compares their statistics
/// with the dataset's closed-form moments.
pub fn conditional_moment_error(
    sampler: &dyn Sampler,
    kind: &DatasetKind,
    grid: &[f64],
    k_eval: usize,
    rng: &mut dyn RngCore,
) -> Result<MomentErrorReport> {
    if k_eval < 2 {
        return Err(config(format!("k_eval must be at least 2, got {k_eval}")));
    }
    let points: Vec<Vec<f64>> = if kind.x_dim() == 0 {
        vec![Vec::new()]
    } else {
        grid.iter().map(|&x| vec![x; kind.x_dim()]).collect()
    };
    if points.is_empty() {
        return Err(config("moment error needs a nonempty x grid"));
    }
    let mut acc = [0.0f64; 6];
    let mut count = 0usize;
    for x in &points {
        let xs = Tensor::new(1, x.len(), x.clone())?.repeat_rows(k_eval);
        let ys = sampler.draw(&xs, rng)?;
        if ys.cols() != kind.y_dim() || ys.rows() != k_eval {
            return Err(Error::Shape(format!(
                "sampler returned {:?}, expected ({k_eval}, {})",
                ys.shape(),
                kind.y_dim()
            )));
        }
        let truth = kind.analytic_moments(x);
        for c in 0..ys.cols() {
            let mut col: Vec<f64> = (0..k_eval).map(|r| ys.get(r, c)).collect();
            let s = column_stats(&mut col);
            let (lo, hi) = truth.median_interval[c];
            acc[0] += (s.mean - truth.mean[c]).abs();
            acc[1] += (s.var - truth.variance[c]).abs() / truth.variance[c].max(f64::MIN_POSITIVE);
            acc[2] += (lo - s.median).max(s.median - hi).max(0.0);
            acc[3] += (s.mad - truth.mad[c]).abs() / truth.mad[c].max(f64::MIN_POSITIVE);
            acc[4] += s.var;
            count += 1;
        }
        acc[5] += pairwise_diversity(&ys)?;
    }
    let n = count as f64;
    Ok(MomentErrorReport {
        mean_abs_err: acc[0] / n,
        var_rel_err: acc[1] / n,
        median_err: acc[2] / n,
        mad_rel_err: acc[3] / n,
        sample_variance: acc[4] / n,
        diversity: acc[5] / points.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecompositionReport {
    pub var_y: f64,
    pub se: f64,
    pub ve: f64,
    pub total: f64,
    pub identity_residual: f64,
}

/// Neumaier summation; the error does not grow with the number of terms.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

/// Splits the mean squared error over all `(y_i, ŷ_j)` pairs into target
/// variance, squared bias and prediction variance (biased variances).
pub fn se_ve_decomposition(y: &[f64], y_hat: &[f64]) -> Result<DecompositionReport> {
    if y.len() < 2 || y_hat.len() < 2 {
        return Err(config(format!(
            "decomposition needs at least 2 draws of each, got {} and {}",
            y.len(),
            y_hat.len()
        )));
    }
    if y.iter().chain(y_hat).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("decomposition inputs must be finite".into()));
    }
    let mean = |v: &[f64]| compensated_sum(v.iter().copied()) / v.len() as f64;
    let (my, mh) = (mean(y), mean(y_hat));
    let var_y = compensated_sum(y.iter().map(|a| (a - my).powi(2))) / y.len() as f64;
    let ve = compensated_sum(y_hat.iter().map(|a| (a - mh).powi(2))) / y_hat.len() as f64;
    let se = (mh - my).powi(2);
    let pairs = y.iter().flat_map(|&a| y_hat.iter().map(move |&b| (a - b).powi(2)));
    let total = compensated_sum(pairs) / (y.len() * y_hat.len()) as f64;
    Ok(DecompositionReport {
        var_y,
        se,
        ve,
        total,
        identity_residual: (total - (var_y + se + ve)).abs(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MedianScan {
    /// Grid points whose expected absolute error is within `1e-12` of the minimum.
    pub argmin: Vec<f64>,
    pub min_value: f64,
    /// `[a, b]` with `CDF(a⁻) ≤ ½ ≤ CDF(b)`: every point in it minimizes `E|y - c|`.
    pub median_interval: (f64, f64),
}

pub const ARGMIN_TOL: f64 = 1e-12;
const PROB_TOL: f64 = 1e-9;

/// Normalizes and sorts a discrete distribution, merging repeated support points.
fn normalize_dist(dist: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
    if dist.is_empty() {
        return Err(config("distribution has no support points"));
    }
    if dist.iter().any(|&(v, p)| !v.is_finite() || !p.is_finite() || p < 0.0) {
        return Err(config("support points must be finite with nonnegative probability"));
    }
    let total: f64 = dist.iter().map(|d| d.1).sum();
    if (total - 1.0).abs() > PROB_TOL {
        return Err(config(format!("probabilities sum to {total}, not 1")));
    }
    let mut sorted = dist.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(sorted.len());
    for (v, p) in sorted {
        match merged.last_mut() {
            Some(last) if last.0 == v => last.1 += p,
            _ => merged.push((v, p)),
        }
    }
    Ok(merged)
}

/// Interval of medians of a discrete distribution.
pub fn median_interval(dist: &[(f64, f64)]) -> Result<(f64, f64)> {
    let d = normalize_dist(dist)?;
    let mut cdf = 0.0;
    for (i, &(v, p)) in d.iter().enumerate() {
        cdf += p;
        if (cdf - 0.5).abs() <= ARGMIN_TOL {
            // a flat stretch of the CDF at ½ up to the next support point
            let hi = d.get(i + 1).map_or(v, |next| next.0);
            return Ok((v, hi));
        }
        if cdf > 0.5 {
            return Ok((v, v));
        }
    }
    let last = d.last().expect("nonempty").0;
    Ok((last, last))
}

/// Evaluates `E|y - c|` at every grid point and collects the minimizers.
pub fn l1_minimizer_scan(dist: &[(f64, f64)], grid: &[f64]) -> Result<MedianScan> {
    let d = normalize_dist(dist)?;
    if grid.is_empty() {
        return Err(config("median scan needs a nonempty grid"));
    }
    let (lo, hi) = (d[0].0, d[d.len() - 1].0);
    let (gmin, gmax) = grid
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &g| (a.min(g), b.max(g)));
    if gmin > lo || gmax < hi {
        return Err(config(format!(
            "grid [{gmin}, {gmax}] does not cover the support [{lo}, {hi}]"
        )));
    }
    let values: Vec<f64> = grid
        .iter()
        .map(|&c| d.iter().map(|&(v, p)| p * (v - c).abs()).sum())
        .collect();
    let min_value = values.iter().copied().fold(f64::INFINITY, f64::min);
    let argmin = grid
        .iter()
        .zip(&values)
        .filter(|(_, &v)| v - min_value <= ARGMIN_TOL)
        .map(|(&c, _)| c)
        .collect();
    Ok(MedianScan {
        argmin,
        min_value,
        median_interval: median_interval(dist)?,
    })
}

/// Grid from `lo` to `hi` inclusive with spacing `step`.
pub fn uniform_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|i| lo + i as f64 * step).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ArchSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ring_centers() -> Vec<[f64; 2]> {
        DatasetKind::ring8().centers()
    }

    #[test]
    fn coverage_of_exact_centers() {
        let centers = ring_centers();
        let rows: Vec<Vec<f64>> = (0..1600).map(|i| centers[i % 8].to_vec()).collect();
        let r = mode_coverage(&Tensor::from_rows(&rows).unwrap(), &centers, 0.05, 0.02).unwrap();
        assert_eq!(r.modes_captured, 8);
        assert_eq!(r.high_quality_fraction, 1.0);
        assert!((r.mode_shares.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn coverage_of_collapsed_samples() {
        let centers = ring_centers();
        let rows: Vec<Vec<f64>> = (0..1000).map(|_| centers[3].to_vec()).collect();
        let r = mode_coverage(&Tensor::from_rows(&rows).unwrap(), &centers, 0.05, 0.02).unwrap();
        assert_eq!(r.modes_captured, 1);
        let small = Tensor::zeros(999, 2);
        assert!(matches!(
            mode_coverage(&small, &centers, 0.05, 0.02),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn coverage_of_real_ring_data() {
        let kind = DatasetKind::ring8();
        let b = kind
            .sample(10_000, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        let r = mode_coverage(&b.y, &kind.centers(), 0.05, 0.02).unwrap();
        assert_eq!(r.modes_captured, 8);
        // mass of a 2D standard normal within radius 3: 1 - exp(-9/2)
        assert!(r.high_quality_fraction >= 0.98);
        assert!((r.high_quality_fraction - (1.0 - (-4.5f64).exp())).abs() < 0.005);
    }

    #[test]
    fn diversity_examples() {
        assert_eq!(pairwise_diversity(&Tensor::col(vec![0.3; 5])).unwrap(), 0.0);
        assert_eq!(pairwise_diversity(&Tensor::col(vec![-1.0, 1.0])).unwrap(), 2.0);
        let t = Tensor::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap();
        assert!((pairwise_diversity(&t).unwrap() - 10.0 / 3.0).abs() < 1e-15);
        assert!(pairwise_diversity(&Tensor::col(vec![1.0])).is_err());
    }

    #[test]
    fn decomposition_examples() {
        let r = se_ve_decomposition(&[0.0, 2.0], &[1.0, 1.0]).unwrap();
        assert_eq!((r.var_y, r.se, r.ve, r.total), (1.0, 0.0, 0.0, 1.0));
        let r = se_ve_decomposition(&[1.0, 2.0, 6.0], &[3.0, 3.0]).unwrap();
        assert_eq!((r.se, r.ve), (0.0, 0.0));
        assert!(r.identity_residual < 1e-12);
        assert!(se_ve_decomposition(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn scan_examples() {
        let grid = uniform_grid(-2.0, 2.0, 1e-3);
        let s = l1_minimizer_scan(&[(-1.0, 0.5), (1.0, 0.5)], &grid).unwrap();
        assert!((s.min_value - 1.0).abs() < 1e-12);
        assert_eq!(s.median_interval, (-1.0, 1.0));
        assert_eq!(s.argmin.len(), 2001);
        assert!(s.argmin.iter().all(|&c| (-1.0 - 1e-9..=1.0 + 1e-9).contains(&c)));

        let s = l1_minimizer_scan(&[(0.0, 1.0)], &grid).unwrap();
        assert_eq!(s.min_value, 0.0);
        assert_eq!(s.argmin.len(), 1);
        assert!(s.argmin[0].abs() < 1e-12);

        let s = l1_minimizer_scan(&[(0.0, 0.25), (1.0, 0.5), (2.0, 0.25)], &grid).unwrap();
        assert_eq!(s.argmin.len(), 1);
        assert!((s.argmin[0] - 1.0).abs() < 1e-12);
        assert_eq!(s.median_interval, (1.0, 1.0));

        assert!(l1_minimizer_scan(&[(0.0, 0.4), (1.0, 0.5)], &grid).is_err());
        assert!(l1_minimizer_scan(&[(5.0, 1.0)], &grid).is_err());
    }

    #[test]
    fn constant_generator_on_two_delta() {
        let mut g = Generator::new(
            1,
            2,
            1,
            &ArchSpec {
                hidden: vec![3],
                ..ArchSpec::default()
            },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let c = 0.4;
        for p in g.net.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let n = g.net.params().len();
        g.net.params_mut()[n - 1].data_mut()[0] = c;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = conditional_moment_error(&g, &DatasetKind::TwoDelta, &x_grid(21), 200, &mut rng)
            .unwrap();
        assert!((r.mean_abs_err - c).abs() < 1e-12);
        assert!((r.var_rel_err - 1.0).abs() < 1e-12);
        assert!(r.sample_variance < 1e-12);
        assert_eq!(r.diversity, 0.0);
        assert_eq!(r.median_err, 0.0);
    }

    struct Oracle(DatasetKind);

    impl Sampler for Oracle {
        fn draw(&self, x: &Tensor, rng: &mut dyn RngCore) -> Result<Tensor> {
            let data = (0..x.rows())
                .map(|r| {
                    let m = self.0.analytic_moments(x.row_slice(r));
                    let z: f64 = StandardNormal.sample(rng);
                    m.mean[0] + m.variance[0].sqrt() * z
                })
                .collect();
            Ok(Tensor::new(x.rows(), 1, data)?)
        }
    }

    #[test]
    fn oracle_generator_has_small_errors() {
        let kind = DatasetKind::HeteroGaussian;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = conditional_moment_error(&Oracle(kind), &kind, &x_grid(21), 200, &mut rng).unwrap();
        assert!(r.var_rel_err < 0.25, "{r:?}");
        assert!(r.mean_abs_err >= 0.0 && r.median_err >= 0.0 && r.mad_rel_err >= 0.0);
    }

    #[test]
    fn predictor_sampler_matches_its_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for family in [Family::Gaussian, Family::Laplace] {
            let pred = Prediction {
                family,
                location: Tensor::col(vec![1.5; 40_000]),
                dispersion: Tensor::col(vec![0.25; 40_000]),
            };
            let s = sample_prediction(&pred, &mut rng);
            let mut v = s.data().to_vec();
            let st = column_stats(&mut v);
            match family {
                Family::Gaussian => {
                    assert!((st.mean - 1.5).abs() < 0.01);
                    assert!((st.var - 0.25).abs() < 0.01);
                }
                Family::Laplace => {
                    assert!((st.median - 1.5).abs() < 0.01);
                    assert!((st.mad - 0.25).abs() < 0.01);
                }
            }
        }
    }

    #[test]
    fn grids() {
        let g = x_grid(21);
        assert_eq!(g.len(), 21);
        assert_eq!((g[0], g[10], g[20]), (-1.0, 0.0, 1.0));
        let u = uniform_grid(-2.0, 2.0, 1e-3);
        assert_eq!(u.len(), 4001);
        assert_eq!(u[1000], -1.0);
        assert_eq!(u[3000], 1.0);
    }
}
