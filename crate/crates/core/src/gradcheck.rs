//! Central-difference verification of tape gradients, for single operations
//! and for every composite generator objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Batch;
use crate::error::Result;
use crate::losses::{gan_d_loss, mle_loss, Family, MomentEstimate, VariantId};
use crate::nets::{gaussian_noise, ArchSpec, Discriminator, Generator, Predictor};
use crate::tensor::{Axis, Tape, Tensor, Var};
use crate::train::{generator_loss, GenStepConfig};

pub const FD_STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-6;
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;

/// Largest `|g_tape - g_fd| / max(1e-8, |g_tape| + |g_fd|)` over all
/// parameter entries, with `g_fd = (f(θ+h) - f(θ-h)) / 2h`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    diff_check(f, params, h, false)
}

/// Like [`finite_diff_check`], but every gradient-stopped value is held at
/// its value at `θ` while differencing. This is the function whose gradient
/// the tape reports for losses built on stopped targets.
pub fn finite_diff_check_frozen<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    diff_check(f, params, h, true)
}

fn diff_check<F>(f: F, params: &[Tensor], h: f64, freeze_stops: bool) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::recording_stops();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
    let stops = tape.recorded_stops();

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let tape = if freeze_stops {
            Tape::replaying_stops(stops.clone())
        } else {
            Tape::new()
        };
        let vars: Vec<Var<'_>> = ps.iter().map(|p| tape.param(p)).collect();
        Ok(f(&tape, &vars)?.item()?)
    };
    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        for j in 0..params[i].len() {
            let orig = params[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * h);
            let tg = analytic[i].data()[j];
            let rel = (tg - fd).abs() / (1e-8f64).max(tg.abs() + fd.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Uniform entries in `[lo, hi]` whose magnitude is at least `gap`.
fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let gap = 1e-3;
    let data = (0..rows * cols)
        .map(|_| {
            let v: f64 = rng.random_range(lo..hi);
            if v.abs() < gap {
                gap.copysign(v)
            } else {
                v
            }
        })
        .collect();
    Tensor::new(rows, cols, data).expect("sized")
}

type OpLoss = for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

fn weighted_sum<'t>(out: Var<'t>) -> Result<Var<'t>> {
    // fixed, non-uniform weights so that every output entry matters differently
    let (r, c) = out.shape();
    let w: Vec<f64> = (0..r * c).map(|i| 0.5 + 0.37 * ((i * 7 % 11) as f64)).collect();
    let w = out.tape().constant_owned(Tensor::new(r, c, w)?);
    Ok(out.mul(w)?.sum()?)
}

/// Every recorded operation, each on fresh random inputs.
fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, OpLoss, Vec<Tensor>)> {
    let mut t = |r, c, lo, hi| random_tensor(rng, r, c, lo, hi);
    vec![
        ("neg", (|_, v| weighted_sum(v[0].neg())) as OpLoss, vec![t(2, 3, -2.0, 2.0)]),
        ("square", |_, v| weighted_sum(v[0].square()), vec![t(2, 3, -2.0, 2.0)]),
        ("abs", |_, v| weighted_sum(v[0].abs()), vec![t(2, 3, -2.0, 2.0)]),
        ("log", |_, v| weighted_sum(v[0].log()?), vec![t(2, 3, 0.5, 2.0)]),
        ("exp", |_, v| weighted_sum(v[0].exp()), vec![t(2, 3, -1.0, 1.0)]),
        ("tanh", |_, v| weighted_sum(v[0].tanh()), vec![t(2, 3, -2.0, 2.0)]),
        ("sigmoid", |_, v| weighted_sum(v[0].sigmoid()), vec![t(2, 3, -2.0, 2.0)]),
        ("leaky_relu", |_, v| weighted_sum(v[0].leaky_relu(0.2)), vec![t(2, 3, -2.0, 2.0)]),
        ("clamp", |_, v| weighted_sum(v[0].clamp(-0.5, 0.5)), vec![Tensor::row(vec![-1.3, -0.2, 0.1, 0.4, 0.9])]),
        ("add", |_, v| weighted_sum(v[0].add(v[1])?), vec![t(2, 2, -2.0, 2.0), t(2, 2, -2.0, 2.0)]),
        ("sub", |_, v| weighted_sum(v[0].sub(v[1])?), vec![t(2, 2, -2.0, 2.0), t(2, 2, -2.0, 2.0)]),
        ("mul", |_, v| weighted_sum(v[0].mul(v[1])?), vec![t(2, 2, -2.0, 2.0), t(2, 2, -2.0, 2.0)]),
        ("div", |_, v| weighted_sum(v[0].div(v[1])?), vec![t(2, 2, -2.0, 2.0), t(2, 2, 0.5, 2.0)]),
        ("scalar_broadcast", |_, v| weighted_sum(v[0].mul(v[1])?.add(v[1])?), vec![t(2, 3, -2.0, 2.0), t(1, 1, 0.5, 2.0)]),
        ("matmul", |_, v| weighted_sum(v[0].matmul(v[1])?), vec![t(2, 3, -1.0, 1.0), t(3, 2, -1.0, 1.0)]),
        ("add_bias", |_, v| weighted_sum(v[0].add_bias(v[1])?), vec![t(3, 2, -1.0, 1.0), t(1, 2, -1.0, 1.0)]),
        ("sum", |_, v| Ok(v[0].square().sum()?), vec![t(2, 3, -2.0, 2.0)]),
        ("mean", |_, v| Ok(v[0].square().mean()?), vec![t(2, 3, -2.0, 2.0)]),
        ("concat_cols", |_, v| weighted_sum(v[0].concat(v[1], Axis::Cols)?), vec![t(2, 1, -1.0, 1.0), t(2, 2, -1.0, 1.0)]),
        ("concat_rows", |_, v| weighted_sum(v[0].concat(v[1], Axis::Rows)?), vec![t(1, 2, -1.0, 1.0), t(2, 2, -1.0, 1.0)]),
        ("slice_rows", |_, v| weighted_sum(v[0].slice_rows(1, 3)?), vec![t(4, 2, -1.0, 1.0)]),
        ("slice_cols", |_, v| weighted_sum(v[0].slice_cols(0, 2)?), vec![t(2, 3, -1.0, 1.0)]),
        ("stack_rows", |tp, v| weighted_sum(tp.stack_rows(v)?), vec![t(1, 2, -1.0, 1.0), t(2, 2, -1.0, 1.0)]),
        ("median_odd", |tp, v| weighted_sum(tp.median(v)?), vec![
            Tensor::row(vec![0.1, -1.0]), Tensor::row(vec![0.7, 0.3]), Tensor::row(vec![-0.4, 0.9]),
        ]),
        ("median_even", |tp, v| weighted_sum(tp.median(v)?), vec![
            Tensor::row(vec![0.1, -1.0]), Tensor::row(vec![0.7, 0.3]),
            Tensor::row(vec![-0.4, 0.9]), Tensor::row(vec![1.5, -0.2]),
        ]),
    ]
}

/// A loss whose recorded gradient disagrees with its values: `sum(stop(a)·a)`
/// evaluates to `Σa²` but records only one factor.
pub fn corrupted_rule_case() -> (&'static str, OpLoss, Vec<Tensor>) {
    (
        "corrupted_rule",
        |_, v| Ok(v[0].gradient_stop().mul(v[0])?.sum()?),
        vec![Tensor::row(vec![0.8, -1.3, 2.0])],
    )
}

pub fn check_ops(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    op_cases(&mut rng)
        .into_iter()
        .map(|(name, f, params)| {
            Ok(CheckResult {
                name: format!("op {name}"),
                max_rel_error: finite_diff_check(f, &params, FD_STEP)?,
                tolerance: OP_TOLERANCE,
            })
        })
        .collect()
}

pub fn check_corrupted_rule() -> Result<CheckResult> {
    let (name, f, params) = corrupted_rule_case();
    Ok(CheckResult {
        name: format!("negative control {name}"),
        max_rel_error: finite_diff_check(f, &params, FD_STEP)?,
        tolerance: OP_TOLERANCE,
    })
}

/// Small conditional problem with three-layer networks.
struct Fixture {
    g: Generator,
    d: Discriminator,
    gaussian: Predictor,
    laplace: Predictor,
    batch: Batch,
    noise: Vec<Tensor>,
}

const X_DIM: usize = 2;
const Y_DIM: usize = 2;
const K: usize = 4;

fn fixture(seed: u64) -> Result<Fixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = ArchSpec {
        hidden: vec![5, 5, 5],
        ..ArchSpec::default()
    };
    let g = Generator::new(X_DIM, 3, Y_DIM, &arch, &mut rng)?;
    let d = Discriminator::new(X_DIM, Y_DIM, &arch, &mut rng)?;
    let gaussian = Predictor::new(X_DIM, Y_DIM, Family::Gaussian, &arch, &mut rng)?;
    let laplace = Predictor::new(X_DIM, Y_DIM, Family::Laplace, &arch, &mut rng)?;
    let rows = 3;
    let batch = Batch::new(
        random_tensor(&mut rng, rows, X_DIM, -1.0, 1.0),
        random_tensor(&mut rng, rows, Y_DIM, -1.5, 1.5),
    )?;
    let noise = (0..K).map(|_| gaussian_noise(rows, 3, &mut rng)).collect();
    Ok(Fixture {
        g,
        d,
        gaussian,
        laplace,
        batch,
        noise,
    })
}

fn composite(name: String, r: Result<f64>) -> Result<CheckResult> {
    Ok(CheckResult {
        name,
        max_rel_error: r?,
        tolerance: COMPOSITE_TOLERANCE,
    })
}

/// Every variant's objective w.r.t. its trained network, plus the
/// discriminator loss and a reconstruction-weighted objective. Stopped
/// targets are frozen during differencing.
pub fn check_composites(seed: u64) -> Result<Vec<CheckResult>> {
    let fx = fixture(seed)?;
    let mut out = Vec::new();
    let step_cfg = |lambda_rec: f64| GenStepConfig {
        k: K,
        lambda_aux: 10.0,
        lambda_rec,
        rec_p: 2,
    };
    for variant in VariantId::ALL {
        let name = format!("variant {variant}");
        if variant == VariantId::MleOnly {
            let p = &fx.gaussian;
            let batch = &fx.batch;
            let r = finite_diff_check_frozen(
                |tape, vars| {
                    let out = p.forward(vars, &batch.x)?;
                    let est = MomentEstimate::from_predictor(&out)?;
                    mle_loss(&est, tape.constant(&batch.y))
                },
                p.net.params(),
                FD_STEP,
            );
            out.push(composite(name, r)?);
            continue;
        }
        let predictor = match variant.family() {
            Some(Family::Laplace) => Some(&fx.laplace),
            _ => Some(&fx.gaussian),
        };
        let cfg = step_cfg(0.0);
        let r = finite_diff_check_frozen(
            |tape, vars| {
                let (total, _) = generator_loss(
                    tape, variant, &fx.g, vars, &fx.d, predictor, &fx.batch, &fx.noise, &cfg,
                )?;
                Ok(total)
            },
            fx.g.net.params(),
            FD_STEP,
        );
        out.push(composite(name, r)?);
    }
    let lp = &fx.laplace;
    let r = finite_diff_check_frozen(
        |tape, vars| {
            let out = lp.forward(vars, &fx.batch.x)?;
            let est = MomentEstimate::from_predictor(&out)?;
            mle_loss(&est, tape.constant(&fx.batch.y))
        },
        lp.net.params(),
        FD_STEP,
    );
    out.push(composite("laplace mle predictor".into(), r)?);
    let cfg = step_cfg(1.0);
    let r = finite_diff_check_frozen(
        |tape, vars| {
            let (total, _) = generator_loss(
                tape,
                VariantId::GPmr2,
                &fx.g,
                vars,
                &fx.d,
                Some(&fx.gaussian),
                &fx.batch,
                &fx.noise,
                &cfg,
            )?;
            Ok(total)
        },
        fx.g.net.params(),
        FD_STEP,
    );
    out.push(composite("g_pmr2 with reconstruction".into(), r)?);
    let fake = fx.g.eval_with_noise(&fx.batch.x, &fx.noise[0])?;
    let r = finite_diff_check_frozen(
        |_, vars| gan_d_loss(&fx.d, vars, &fx.batch.x, &fx.batch.y, &fake),
        fx.d.net.params(),
        FD_STEP,
    );
    out.push(composite("discriminator loss".into(), r)?);
    Ok(out)
}

/// All operation and composite checks.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut all = check_ops(seed)?;
    all.extend(check_composites(seed)?);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_and_constant() {
        let p = [Tensor::row(vec![0.3, -1.2, 2.0])];
        let e = finite_diff_check(|_, v| Ok(v[0].square().sum()?), &p, FD_STEP).unwrap();
        assert!(e < 1e-6, "{e}");
        let e = finite_diff_check(|t, _| Ok(t.scalar(3.0)), &p, FD_STEP).unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn all_ops_pass() {
        for r in check_ops(7).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn gaussian_mr2_on_random_mlp() {
        let all = check_composites(11).unwrap();
        let mr2 = all.iter().find(|r| r.name == "variant g_mr2").unwrap();
        assert!(mr2.max_rel_error < 1e-3, "{mr2:?}");
        assert_eq!(all.iter().filter(|r| r.name.starts_with("variant")).count(), 12);
    }

    #[test]
    fn corrupted_rule_is_caught() {
        let r = check_corrupted_rule().unwrap();
        assert!(!r.passed());
        // tape sees a, differences see 2a
        assert!((r.max_rel_error - 1.0 / 3.0).abs() < 1e-6, "{r:?}");
    }
}
