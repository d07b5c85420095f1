//! Synthetic datasets with closed-form conditional moments.

use std::f64::consts::{FRAC_2_PI, PI};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{config, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DatasetKind {
    /// Eight equiprobable isotropic Gaussians on a circle; unconditional.
    Ring8 { radius: f64, mode_std: f64 },
    /// `y ∈ {-1, 1}` with equal probability, independent of `x ~ U[-1, 1]`.
    TwoDelta,
    /// `y | x ~ N(sin πx, (0.1 + 0.4x²)²)`.
    HeteroGaussian,
    /// `y | x ~ ½N(g, s²) + ½N(-g, s²)`, independent of `x ~ U[-1, 1]`.
    CondBimodal { gap: f64, comp_std: f64 },
}

impl DatasetKind {
    pub fn ring8() -> Self {
        DatasetKind::Ring8 {
            radius: 2.0,
            mode_std: 0.05,
        }
    }

    pub fn cond_bimodal() -> Self {
        DatasetKind::CondBimodal {
            gap: 1.0,
            comp_std: 0.1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::Ring8 { .. } => "ring8",
            DatasetKind::TwoDelta => "two_delta",
            DatasetKind::HeteroGaussian => "hetero_gaussian",
            DatasetKind::CondBimodal { .. } => "cond_bimodal",
        }
    }

    /// Default parameters for a dataset name.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "ring8" => Ok(Self::ring8()),
            "two_delta" => Ok(DatasetKind::TwoDelta),
            "hetero_gaussian" => Ok(DatasetKind::HeteroGaussian),
            "cond_bimodal" => Ok(Self::cond_bimodal()),
            other => Err(config(format!("unknown dataset `{other}`"))),
        }
    }

    pub fn x_dim(&self) -> usize {
        match self {
            DatasetKind::Ring8 { .. } => 0,
            _ => 1,
        }
    }

    pub fn y_dim(&self) -> usize {
        match self {
            DatasetKind::Ring8 { .. } => 2,
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        match *self {
            DatasetKind::Ring8 { radius, mode_std } => {
                if !(ok(radius) && radius > 0.0 && ok(mode_std)) {
                    return Err(config(format!(
                        "ring8 needs radius > 0 and mode_std >= 0, got {radius}, {mode_std}"
                    )));
                }
            }
            DatasetKind::CondBimodal { gap, comp_std } => {
                if !(ok(gap) && ok(comp_std)) {
                    return Err(config(format!(
                        "cond_bimodal needs gap >= 0 and comp_std >= 0, got {gap}, {comp_std}"
                    )));
                }
            }
            DatasetKind::TwoDelta | DatasetKind::HeteroGaussian => {}
        }
        Ok(())
    }

    /// Ring centers, or an empty list for other datasets.
    pub fn centers(&self) -> Vec<[f64; 2]> {
        match *self {
            DatasetKind::Ring8 { radius, .. } => (0..8)
                .map(|k| {
                    let a = 2.0 * PI * k as f64 / 8.0;
                    [radius * a.cos(), radius * a.sin()]
                })
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Draws `n` pairs.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Batch> {
        self.validate()?;
        let (dx, dy) = (self.x_dim(), self.y_dim());
        let mut x = Vec::with_capacity(n * dx);
        let mut y = Vec::with_capacity(n * dy);
        let normal = |rng: &mut R| -> f64 { StandardNormal.sample(rng) };
        match *self {
            DatasetKind::Ring8 { mode_std, .. } => {
                let centers = self.centers();
                for _ in 0..n {
                    let c = centers[rng.random_range(0..8)];
                    y.push(c[0] + mode_std * normal(rng));
                    y.push(c[1] + mode_std * normal(rng));
                }
            }
            DatasetKind::TwoDelta => {
                for _ in 0..n {
                    x.push(rng.random_range(-1.0..=1.0));
                    y.push(if rng.random_bool(0.5) { 1.0 } else { -1.0 });
                }
            }
            DatasetKind::HeteroGaussian => {
                for _ in 0..n {
                    let xi: f64 = rng.random_range(-1.0..=1.0);
                    x.push(xi);
                    y.push((PI * xi).sin() + hetero_std(xi) * normal(rng));
                }
            }
            DatasetKind::CondBimodal { gap, comp_std } => {
                for _ in 0..n {
                    x.push(rng.random_range(-1.0..=1.0));
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    y.push(sign * gap + comp_std * normal(rng));
                }
            }
        }
        Batch::new(Tensor::new(n, dx, x)?, Tensor::new(n, dy, y)?)
    }

    /// Closed-form moments of `y | x`, one entry per output coordinate.
    pub fn analytic_moments(&self, x: &[f64]) -> AnalyticMoments {
        match *self {
            DatasetKind::Ring8 { radius, mode_std } => {
                // per coordinate: an equal mixture of N(r cos(2πk/8), s²)
                let coord: Vec<f64> = (0..8)
                    .map(|k| radius * (2.0 * PI * k as f64 / 8.0).cos())
                    .collect();
                let variance = radius * radius / 2.0 + mode_std * mode_std;
                let mad = coord.iter().map(|&c| folded_normal_mean(c, mode_std)).sum::<f64>() / 8.0;
                AnalyticMoments {
                    mean: vec![0.0; 2],
                    variance: vec![variance; 2],
                    median_interval: vec![(0.0, 0.0); 2],
                    mad: vec![mad; 2],
                }
            }
            DatasetKind::TwoDelta => AnalyticMoments {
                mean: vec![0.0],
                variance: vec![1.0],
                median_interval: vec![(-1.0, 1.0)],
                mad: vec![1.0],
            },
            DatasetKind::HeteroGaussian => {
                let xi = x.first().copied().unwrap_or(0.0);
                let m = (PI * xi).sin();
                let s = hetero_std(xi);
                AnalyticMoments {
                    mean: vec![m],
                    variance: vec![s * s],
                    median_interval: vec![(m, m)],
                    mad: vec![s * FRAC_2_PI.sqrt()],
                }
            }
            DatasetKind::CondBimodal { gap, comp_std } => AnalyticMoments {
                mean: vec![0.0],
                variance: vec![gap * gap + comp_std * comp_std],
                median_interval: vec![(-gap, gap)],
                mad: vec![folded_normal_mean(gap, comp_std)],
            },
        }
    }
}

/// Noise scale of `hetero_gaussian` at `x`.
pub fn hetero_std(x: f64) -> f64 {
    0.1 + 0.4 * x * x
}

/// `E|Z|` for `Z ~ N(c, s²)`.
fn folded_normal_mean(c: f64, s: f64) -> f64 {
    if s == 0.0 {
        return c.abs();
    }
    let phi = Normal::standard();
    s * FRAC_2_PI.sqrt() * (-c * c / (2.0 * s * s)).exp() + c * (1.0 - 2.0 * phi.cdf(-c / s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticMoments {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Interval of minimizers of `E|y - m|`.
    pub median_interval: Vec<(f64, f64)>,
    /// `E|y - m|` for any `m` in the median interval.
    pub mad: Vec<f64>,
}

impl AnalyticMoments {
    /// Midpoint of the median interval.
    pub fn median(&self) -> Vec<f64> {
        self.median_interval.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect()
    }
}

/// Paired inputs and targets; `x` may have zero columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Tensor,
}

impl Batch {
    pub fn new(x: Tensor, y: Tensor) -> Result<Self> {
        if x.rows() != y.rows() {
            return Err(Error::Shape(format!(
                "batch has {} inputs but {} targets",
                x.rows(),
                y.rows()
            )));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn y_dim(&self) -> usize {
        self.y.cols()
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            x: gather_rows(&self.x, idx),
            y: gather_rows(&self.y, idx),
        }
    }

    /// Draws `size` rows uniformly with replacement.
    pub fn minibatch<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Batch {
        let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..self.len())).collect();
        self.select(&idx)
    }

    /// Writes `x0,..,y0,..` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header: Vec<String> = (0..self.x_dim()).map(|i| format!("x{i}")).collect();
        header.extend((0..self.y_dim()).map(|i| format!("y{i}")));
        writeln!(w, "{}", header.join(","))?;
        for r in 0..self.len() {
            let row: Vec<String> = self
                .x
                .row_slice(r)
                .iter()
                .chain(self.y.row_slice(r))
                .map(|v| format!("{v:?}"))
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(idx.len() * t.cols());
    for &i in idx {
        data.extend_from_slice(t.row_slice(i));
    }
    Tensor::new(idx.len(), t.cols(), data).expect("gathered rows")
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Batch,
    pub val: Batch,
    pub test: Batch,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(config("dataset split sizes must be positive"));
        }
        self.kind.validate()
    }

    /// Samples all splits from the dataset seed.
    pub fn generate(&self) -> Result<Splits> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let n = self.n_train + self.n_val + self.n_test;
        let all = self.kind.sample(n, &mut rng)?;
        let (train, rest) = partition(&all, self.n_train, &mut rng);
        let val = rest.select(&(0..self.n_val).collect::<Vec<_>>());
        let test = rest.select(&(self.n_val..rest.len()).collect::<Vec<_>>());
        Ok(Splits { train, val, test })
    }
}

fn partition<R: Rng + ?Sized>(batch: &Batch, first: usize, rng: &mut R) -> (Batch, Batch) {
    let mut idx: Vec<usize> = (0..batch.len()).collect();
    idx.shuffle(rng);
    (batch.select(&idx[..first]), batch.select(&idx[first..]))
}

/// Shuffled train/val/test partition by fractions summing to one.
pub fn split<R: Rng + ?Sized>(
    batch: &Batch,
    fractions: (f64, f64, f64),
    rng: &mut R,
) -> Result<(Batch, Batch, Batch)> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(config(format!(
            "split fractions must be in [0, 1] and sum to 1, got ({a}, {b}, {c})"
        )));
    }
    let n = batch.len();
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_val = ((b * n as f64).round() as usize).min(n - n_train);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    Ok((
        batch.select(&idx[..n_train]),
        batch.select(&idx[n_train..n_train + n_val]),
        batch.select(&idx[n_train + n_val..]),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn mean_var(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n)
    }

    fn nearest_center(centers: &[[f64; 2]], p: &[f64]) -> (usize, f64) {
        centers
            .iter()
            .enumerate()
            .map(|(k, c)| (k, ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
    }

    #[test]
    fn ring8_zero_noise_hits_centers() {
        let kind = DatasetKind::Ring8 {
            radius: 2.0,
            mode_std: 0.0,
        };
        let b = kind.sample(500, &mut rng(1)).unwrap();
        assert_eq!(b.x_dim(), 0);
        let centers = kind.centers();
        for r in 0..b.len() {
            assert!(nearest_center(&centers, b.y.row_slice(r)).1 < 1e-12);
        }
    }

    #[test]
    fn ring8_mode_frequencies_and_mean() {
        let kind = DatasetKind::ring8();
        let n = 10_000;
        let b = kind.sample(n, &mut rng(2)).unwrap();
        let centers = kind.centers();
        let mut counts = [0usize; 8];
        for r in 0..n {
            counts[nearest_center(&centers, b.y.row_slice(r)).0] += 1;
        }
        let p = 1.0 / 8.0;
        let std = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * std, "{counts:?}");
        }
        for col in 0..2 {
            let v: Vec<f64> = (0..n).map(|r| b.y.get(r, col)).collect();
            assert!(mean_var(&v).0.abs() < 0.05);
        }
    }

    #[test]
    fn two_delta_support_and_moments() {
        let b = DatasetKind::TwoDelta.sample(10_000, &mut rng(3)).unwrap();
        assert!(b.y.data().iter().all(|&v| v == 1.0 || v == -1.0));
        assert!(b.x.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        assert!(mean_var(b.y.data()).0.abs() < 0.03);
        let m = DatasetKind::TwoDelta.analytic_moments(&[0.3]);
        assert_eq!(m.variance, vec![1.0]);
        assert_eq!(m.median_interval, vec![(-1.0, 1.0)]);
        assert_eq!(m.mad, vec![1.0]);
    }

    #[test]
    fn hetero_formulas() {
        let k = DatasetKind::HeteroGaussian;
        let m0 = k.analytic_moments(&[0.0]);
        assert!(m0.mean[0].abs() < 1e-15);
        assert!((m0.variance[0] - 0.01).abs() < 1e-15);
        let m1 = k.analytic_moments(&[1.0]);
        assert!(m1.mean[0].abs() < 1e-15);
        assert!((m1.variance[0] - 0.25).abs() < 1e-15);
        assert!((m1.mad[0] - 0.5 * (2.0 / PI).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn hetero_edge_bin_variance() {
        let b = DatasetKind::HeteroGaussian.sample(200_000, &mut rng(4)).unwrap();
        let ys: Vec<f64> = (0..b.len())
            .filter(|&r| b.x.get(r, 0) >= 0.95)
            .map(|r| b.y.get(r, 0))
            .collect();
        let v = mean_var(&ys).1;
        assert!((v - 0.25).abs() < 0.15 * 0.25, "{v}");
    }

    #[test]
    fn cond_bimodal_moments_and_split() {
        let k = DatasetKind::cond_bimodal();
        let m = k.analytic_moments(&[0.0]);
        assert!((m.variance[0] - 1.01).abs() < 1e-15);
        assert_eq!(m.mean[0], 0.0);
        let n = 10_000;
        let b = k.sample(n, &mut rng(5)).unwrap();
        let pos = b.y.data().iter().filter(|&&v| v > 0.0).count() as f64;
        assert!((pos - n as f64 / 2.0).abs() < 3.0 * (n as f64 * 0.25).sqrt());
    }

    #[test]
    fn folded_normal_limits() {
        assert_eq!(folded_normal_mean(-1.5, 0.0), 1.5);
        assert!((folded_normal_mean(0.0, 2.0) - 2.0 * FRAC_2_PI.sqrt()).abs() < 1e-15);
        assert!((folded_normal_mean(5.0, 0.1) - 5.0).abs() < 1e-12);
    }

    // 1e6 draws: with 1e5, a unit-variance bin of 5000 points has mean std 0.014.
    /// Law of total variance over a bin, by fine quadrature of the closed forms.
    fn binned_oracle(kind: &DatasetKind, lo: f64, hi: f64) -> (f64, f64) {
        let steps = 2000;
        let xs: Vec<f64> = (0..steps)
            .map(|i| lo + (hi - lo) * (i as f64 + 0.5) / steps as f64)
            .collect();
        let ms: Vec<AnalyticMoments> = xs.iter().map(|&x| kind.analytic_moments(&[x])).collect();
        let mean = ms.iter().map(|m| m.mean[0]).sum::<f64>() / steps as f64;
        let within = ms.iter().map(|m| m.variance[0]).sum::<f64>() / steps as f64;
        let between = ms.iter().map(|m| (m.mean[0] - mean).powi(2)).sum::<f64>() / steps as f64;
        (mean, within + between)
    }

    #[test]
    fn binned_monte_carlo_matches_closed_forms() {
        for (i, kind) in [
            DatasetKind::TwoDelta,
            DatasetKind::HeteroGaussian,
            DatasetKind::cond_bimodal(),
        ]
        .iter()
        .enumerate()
        {
            let b = kind.sample(1_000_000, &mut rng(10 + i as u64)).unwrap();
            for bin in 0..20 {
                let lo = -1.0 + 0.1 * bin as f64;
                let hi = lo + 0.1;
                let ys: Vec<f64> = (0..b.len())
                    .filter(|&r| {
                        let x = b.x.get(r, 0);
                        x >= lo && (x < hi || bin == 19)
                    })
                    .map(|r| b.y.get(r, 0))
                    .collect();
                let (m, v) = mean_var(&ys);
                let (om, ov) = binned_oracle(kind, lo, hi);
                assert!((m - om).abs() < 0.02, "{} bin {bin}: mean {m} vs {om}", kind.name());
                assert!((v - ov).abs() < 0.05 * ov, "{} bin {bin}: var {v} vs {ov}", kind.name());
            }
        }
        let b = DatasetKind::ring8().sample(100_000, &mut rng(20)).unwrap();
        let m = DatasetKind::ring8().analytic_moments(&[]);
        for col in 0..2 {
            let v: Vec<f64> = (0..b.len()).map(|r| b.y.get(r, col)).collect();
            let (mu, var) = mean_var(&v);
            assert!(mu.abs() < 0.02);
            assert!((var - m.variance[col]).abs() < 0.05 * m.variance[col]);
            let mad = v.iter().map(|a| a.abs()).sum::<f64>() / v.len() as f64;
            assert!((mad - m.mad[col]).abs() < 0.02, "{mad} vs {}", m.mad[col]);
        }
    }

    #[test]
    fn split_sizes_multiset_and_determinism() {
        let b = DatasetKind::HeteroGaussian.sample(1000, &mut rng(6)).unwrap();
        let (tr, va, te) = split(&b, (0.8, 0.1, 0.1), &mut rng(7)).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (800, 100, 100));
        let mut joined: Vec<f64> = [&tr, &va, &te]
            .iter()
            .flat_map(|s| s.y.data().to_vec())
            .collect();
        let mut orig = b.y.data().to_vec();
        joined.sort_by(f64::total_cmp);
        orig.sort_by(f64::total_cmp);
        assert_eq!(joined, orig);
        let again = split(&b, (0.8, 0.1, 0.1), &mut rng(7)).unwrap();
        assert_eq!(again.0, tr);
        assert!(matches!(split(&b, (0.8, 0.1, 0.2), &mut rng(7)), Err(Error::Config(_))));
    }

    #[test]
    fn spec_generation_is_reproducible() {
        let spec = DatasetSpec {
            kind: DatasetKind::ring8(),
            n_train: 50,
            n_val: 10,
            n_test: 5,
            seed: 9,
        };
        let a = spec.generate().unwrap();
        assert_eq!(a, spec.generate().unwrap());
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (50, 10, 5));
        let bad = DatasetSpec { n_val: 0, ..spec };
        assert!(bad.generate().is_err());
    }

    #[test]
    fn csv_dump() {
        let b = Batch::new(Tensor::col(vec![0.5]), Tensor::col(vec![-1.0])).unwrap();
        let mut out = Vec::new();
        b.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "x0,y0\n0.5,-1.0\n");
    }
}
