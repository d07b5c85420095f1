//! Multilayer perceptrons for the generator `G(x, z)`, the discriminator
//! `D(x, y)` and the moment predictor `P(x)`.
//!
//! A [`Network`] owns its parameters as plain tensors, ordered
//! `[W0, b0, W1, b1, ...]` with `Wi` shaped `fan_in × fan_out`. To
//! differentiate, bind the parameters onto a tape with [`Network::bind`] and
//! run [`Network::forward`]; for evaluation without recording use
//! [`Network::eval`]. Both paths share the same kernels and agree bit for bit.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{config, Error, Result};
use crate::losses::Family;
use crate::tensor::{sigmoid, Axis, Tape, Tensor, UnaryKind, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Linear,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply_var<'t>(self, v: Var<'t>) -> Var<'t> {
        match self {
            Activation::Linear => v,
            Activation::LeakyRelu(s) => v.leaky_relu(s),
            Activation::Tanh => v.tanh(),
            Activation::Sigmoid => v.sigmoid(),
        }
    }

    fn apply(self, t: &mut Tensor) {
        let f: fn(f64, f64) -> f64 = match self {
            Activation::Linear => return,
            Activation::LeakyRelu(_) => |v, s| UnaryKind::LeakyRelu(s).apply(v),
            Activation::Tanh => |v, _| v.tanh(),
            Activation::Sigmoid => |v, _| sigmoid(v),
        };
        let slope = match self {
            Activation::LeakyRelu(s) => s,
            _ => 0.0,
        };
        for v in t.data_mut() {
            *v = f(*v, slope);
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Linear => write!(f, "linear"),
            Activation::LeakyRelu(s) => write!(f, "leaky_relu:{s}"),
            Activation::Tanh => write!(f, "tanh"),
            Activation::Sigmoid => write!(f, "sigmoid"),
        }
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(Activation::Linear),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "leaky_relu" => Ok(Activation::LeakyRelu(0.2)),
            other => match other.strip_prefix("leaky_relu:") {
                Some(slope) => slope
                    .parse()
                    .map(Activation::LeakyRelu)
                    .map_err(|e| format!("bad leaky_relu slope `{slope}`: {e}")),
                None => Err(format!("unknown activation `{other}`")),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(config("network input and output dims must be >= 1"));
        }
        if self.hidden.is_empty() {
            return Err(config("network needs at least one hidden layer"));
        }
        if self.hidden.contains(&0) {
            return Err(config("hidden widths must be >= 1"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_dim;
        for &w in self.hidden.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((fan_in, w));
            fan_in = w;
        }
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| (i + 1) * o).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: MlpSpec,
    params: Vec<Tensor>,
}

impl Network {
    /// Uniform(±√(6/fan_in)) weights, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::new();
        for (fan_in, fan_out) in spec.layer_dims() {
            let bound = (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
            params.push(Tensor::new(fan_in, fan_out, w)?);
            params.push(Tensor::zeros(1, fan_out));
        }
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: MlpSpec, params: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let dims = spec.layer_dims();
        if params.len() != 2 * dims.len() {
            return Err(Error::Shape(format!(
                "{} parameter tensors for {} layers",
                params.len(),
                dims.len()
            )));
        }
        for (l, (fan_in, fan_out)) in dims.into_iter().enumerate() {
            if params[2 * l].shape() != (fan_in, fan_out) || params[2 * l + 1].shape() != (1, fan_out)
            {
                return Err(Error::Shape(format!("layer {l} parameter shapes do not chain")));
            }
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Records the parameters on `tape`, as trainable leaves or as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p)
                } else {
                    tape.constant(p)
                }
            })
            .collect()
    }

    pub fn forward<'t>(&self, bound: &[Var<'t>], input: Var<'t>) -> Result<Var<'t>> {
        self.check_input(input.shape().1)?;
        let layers = self.spec.layer_dims().len();
        let mut h = input;
        for l in 0..layers {
            h = h.matmul(bound[2 * l])?.add_bias(bound[2 * l + 1])?;
            let act = if l + 1 == layers {
                self.spec.output_activation
            } else {
                self.spec.hidden_activation
            };
            h = act.apply_var(h);
        }
        Ok(h)
    }

    /// Forward pass without a tape.
    pub fn eval(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input.cols())?;
        let layers = self.spec.layer_dims().len();
        let mut h = input.clone();
        for l in 0..layers {
            h = h.matmul(&self.params[2 * l])?;
            let bias = self.params[2 * l + 1].data();
            let cols = h.cols();
            for (i, v) in h.data_mut().iter_mut().enumerate() {
                *v += bias[i % cols];
            }
            let act = if l + 1 == layers {
                self.spec.output_activation
            } else {
                self.spec.hidden_activation
            };
            act.apply(&mut h);
        }
        Ok(h)
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "network expects {} input columns, got {cols}",
                self.spec.input_dim
            )));
        }
        Ok(())
    }
}

/// Draws an `rows × cols` block of standard normal noise.
pub fn gaussian_noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(rows, cols, data).expect("sized")
}

/// Shared hyperparameters for the toy architectures.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            activation: Activation::LeakyRelu(0.2),
        }
    }
}

/// `G(x, z)`: an MLP on `concat(x, z)`. Unconditional generators have `x_dim == 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub net: Network,
    pub x_dim: usize,
    pub noise_dim: usize,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(
        x_dim: usize,
        noise_dim: usize,
        y_dim: usize,
        arch: &ArchSpec,
        rng: &mut R,
    ) -> Result<Self> {
        if noise_dim == 0 {
            return Err(config("noise_dim must be >= 1"));
        }
        let spec = MlpSpec {
            input_dim: x_dim + noise_dim,
            hidden: arch.hidden.clone(),
            output_dim: y_dim,
            hidden_activation: arch.activation,
            output_activation: Activation::Linear,
        };
        Ok(Self {
            net: Network::init(spec, rng)?,
            x_dim,
            noise_dim,
        })
    }

    pub fn y_dim(&self) -> usize {
        self.net.spec().output_dim
    }

    pub fn forward<'t>(&self, bound: &[Var<'t>], x: Var<'t>, z: Var<'t>) -> Result<Var<'t>> {
        if x.shape().1 != self.x_dim || z.shape().1 != self.noise_dim {
            return Err(Error::Shape(format!(
                "generator expects x:{} z:{}, got x:{} z:{}",
                self.x_dim,
                self.noise_dim,
                x.shape().1,
                z.shape().1
            )));
        }
        let input = x.concat(z, Axis::Cols)?;
        self.net.forward(bound, input)
    }

    /// One tape-recorded output block per noise block. All blocks go through
    /// a single stacked forward pass and are sliced back apart, which is
    /// equivalent to one pass per block.
    pub fn samples_with_noise<'t>(
        &self,
        bound: &[Var<'t>],
        x: &Tensor,
        noise: &[Tensor],
    ) -> Result<Vec<Var<'t>>> {
        let tape = bound
            .first()
            .ok_or_else(|| Error::Shape("generator has no parameters bound".into()))?
            .tape();
        let b = x.rows();
        let k = noise.len();
        let mut z = Vec::with_capacity(b * k * self.noise_dim);
        for block in noise {
            if block.shape() != (b, self.noise_dim) {
                return Err(Error::Shape(format!(
                    "noise block {:?}, expected ({b}, {})",
                    block.shape(),
                    self.noise_dim
                )));
            }
            z.extend_from_slice(block.data());
        }
        let xs = tape.constant_owned(x.repeat_rows(k));
        let zs = tape.constant_owned(Tensor::new(b * k, self.noise_dim, z)?);
        let out = self.forward(bound, xs, zs)?;
        (0..k)
            .map(|i| out.slice_rows(i * b, (i + 1) * b).map_err(Error::from))
            .collect()
    }

    /// `K` samples per row of `x`, with fresh `z ~ N(0, I)`.
    pub fn sample_k<'t, R: Rng + ?Sized>(
        &self,
        bound: &[Var<'t>],
        x: &Tensor,
        k: usize,
        rng: &mut R,
    ) -> Result<Vec<Var<'t>>> {
        if k < 2 {
            return Err(config(format!("K must be >= 2, got {k}")));
        }
        let noise: Vec<Tensor> = (0..k)
            .map(|_| gaussian_noise(x.rows(), self.noise_dim, rng))
            .collect();
        self.samples_with_noise(bound, x, &noise)
    }

    /// One sample per row of `x` without recording.
    pub fn sample<R: Rng + ?Sized>(&self, x: &Tensor, rng: &mut R) -> Result<Tensor> {
        let z = gaussian_noise(x.rows(), self.noise_dim, rng);
        self.eval_with_noise(x, &z)
    }

    pub fn eval_with_noise(&self, x: &Tensor, z: &Tensor) -> Result<Tensor> {
        if x.cols() != self.x_dim || z.cols() != self.noise_dim || x.rows() != z.rows() {
            return Err(Error::Shape(format!(
                "generator expects x:{} z:{}, got {:?} {:?}",
                self.x_dim,
                self.noise_dim,
                x.shape(),
                z.shape()
            )));
        }
        self.net.eval(&x.concat(z, Axis::Cols)?)
    }
}

/// `D(x, y)` with a sigmoid output. Unconditional discriminators see `y` only.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub net: Network,
    pub x_dim: usize,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(
        x_dim: usize,
        y_dim: usize,
        arch: &ArchSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let spec = MlpSpec {
            input_dim: x_dim + y_dim,
            hidden: arch.hidden.clone(),
            output_dim: 1,
            hidden_activation: arch.activation,
            output_activation: Activation::Sigmoid,
        };
        Ok(Self {
            net: Network::init(spec, rng)?,
            x_dim,
        })
    }

    pub fn forward<'t>(&self, bound: &[Var<'t>], x: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
        if x.shape().1 != self.x_dim {
            return Err(Error::Shape(format!(
                "discriminator expects x:{}, got {}",
                self.x_dim,
                x.shape().1
            )));
        }
        self.net.forward(bound, x.concat(y, Axis::Cols)?)
    }

    pub fn eval(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        if x.cols() != self.x_dim {
            return Err(Error::Shape(format!(
                "discriminator expects x:{}, got {}",
                self.x_dim,
                x.cols()
            )));
        }
        self.net.eval(&x.concat(y, Axis::Cols)?)
    }
}

/// Location and log-dispersion heads recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct PredictorOutput<'t> {
    pub family: Family,
    pub location: Var<'t>,
    pub log_dispersion: Var<'t>,
}

impl<'t> PredictorOutput<'t> {
    /// `exp(log_dispersion)`, strictly positive.
    pub fn dispersion(&self) -> Var<'t> {
        self.log_dispersion.exp()
    }
}

/// Predicted moments as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub family: Family,
    pub location: Tensor,
    pub dispersion: Tensor,
}

/// `P(x)`: a noise-free clone of the generator emitting location and
/// log-dispersion for every output coordinate. Unconditional predictors get a
/// constant input of ones.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    pub net: Network,
    pub x_dim: usize,
    pub family: Family,
}

impl Predictor {
    pub fn new<R: Rng + ?Sized>(
        x_dim: usize,
        y_dim: usize,
        family: Family,
        arch: &ArchSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let spec = MlpSpec {
            input_dim: x_dim.max(1),
            hidden: arch.hidden.clone(),
            output_dim: 2 * y_dim,
            hidden_activation: arch.activation,
            output_activation: Activation::Linear,
        };
        Ok(Self {
            net: Network::init(spec, rng)?,
            x_dim,
            family,
        })
    }

    pub fn y_dim(&self) -> usize {
        self.net.spec().output_dim / 2
    }

    fn input(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.x_dim {
            return Err(Error::Shape(format!(
                "predictor expects x:{}, got {}",
                self.x_dim,
                x.cols()
            )));
        }
        Ok(if self.x_dim == 0 {
            Tensor::ones(x.rows(), 1)
        } else {
            x.clone()
        })
    }

    pub fn forward<'t>(&self, bound: &[Var<'t>], x: &Tensor) -> Result<PredictorOutput<'t>> {
        let tape = bound
            .first()
            .ok_or_else(|| Error::Shape("predictor has no parameters bound".into()))?
            .tape();
        let input = tape.constant_owned(self.input(x)?);
        let out = self.net.forward(bound, input)?;
        let dy = self.y_dim();
        Ok(PredictorOutput {
            family: self.family,
            location: out.slice_cols(0, dy)?,
            log_dispersion: out.slice_cols(dy, 2 * dy)?,
        })
    }

    pub fn eval(&self, x: &Tensor) -> Result<Prediction> {
        let out = self.net.eval(&self.input(x)?)?;
        let dy = self.y_dim();
        Ok(Prediction {
            family: self.family,
            location: out.slice_cols(0, dy)?,
            dispersion: out.slice_cols(dy, 2 * dy)?.map(f64::exp),
        })
    }
}

/// Text checkpoint:
///
/// ```text
/// mrlab-checkpoint 1
/// <key> <value>            # header lines, including the MLP spec
/// tensors <count>
/// tensor <rows> <cols>
/// <row values separated by spaces>
/// ...
/// ```
///
/// Values use Rust's shortest round-trip float formatting, so a load
/// restores the parameters exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub net: Network,
}

const CHECKPOINT_MAGIC: &str = "mrlab-checkpoint 1";

impl Checkpoint {
    pub fn new(net: Network) -> Self {
        Self {
            meta: BTreeMap::new(),
            net,
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let spec = self.net.spec();
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        for (k, v) in &self.meta {
            writeln!(w, "meta.{k} {v}")?;
        }
        writeln!(w, "input_dim {}", spec.input_dim)?;
        let hidden: Vec<String> = spec.hidden.iter().map(usize::to_string).collect();
        writeln!(w, "hidden {}", hidden.join(","))?;
        writeln!(w, "output_dim {}", spec.output_dim)?;
        writeln!(w, "hidden_activation {}", spec.hidden_activation)?;
        writeln!(w, "output_activation {}", spec.output_activation)?;
        writeln!(w, "tensors {}", self.net.params().len())?;
        for t in self.net.params() {
            writeln!(w, "tensor {} {}", t.rows(), t.cols())?;
            for r in 0..t.rows() {
                let row: Vec<String> = t.row_slice(r).iter().map(|v| format!("{v:?}")).collect();
                writeln!(w, "{}", row.join(" "))?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?
                .map_err(Error::from)
        };
        if next()? != CHECKPOINT_MAGIC {
            return Err(bad("missing header".into()));
        }
        let mut meta = BTreeMap::new();
        let mut header = BTreeMap::new();
        let count = loop {
            let line = next()?;
            let (k, v) = line
                .split_once(' ')
                .ok_or_else(|| bad(format!("malformed header line `{line}`")))?;
            if k == "tensors" {
                break v.parse::<usize>().map_err(|e| bad(e.to_string()))?;
            }
            match k.strip_prefix("meta.") {
                Some(mk) => meta.insert(mk.to_string(), v.to_string()),
                None => header.insert(k.to_string(), v.to_string()),
            };
        };
        let field = |k: &str| {
            header
                .get(k)
                .cloned()
                .ok_or_else(|| bad(format!("missing `{k}`")))
        };
        let parse_usize = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("`{s}`: {e}")));
        let spec = MlpSpec {
            input_dim: parse_usize(&field("input_dim")?)?,
            hidden: field("hidden")?
                .split(',')
                .map(parse_usize)
                .collect::<Result<_>>()?,
            output_dim: parse_usize(&field("output_dim")?)?,
            hidden_activation: field("hidden_activation")?.parse().map_err(bad)?,
            output_activation: field("output_activation")?.parse().map_err(bad)?,
        };
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let line = next()?;
            let dims: Vec<&str> = line.split_whitespace().collect();
            if dims.len() != 3 || dims[0] != "tensor" {
                return Err(bad(format!("expected tensor header, got `{line}`")));
            }
            let (rows, cols) = (parse_usize(dims[1])?, parse_usize(dims[2])?);
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                for tok in next()?.split_whitespace() {
                    data.push(tok.parse::<f64>().map_err(|e| bad(format!("`{tok}`: {e}")))?);
                }
            }
            params.push(Tensor::new(rows, cols, data)?);
        }
        Ok(Self {
            meta,
            net: Network::from_params(spec, params)?,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing meta `{key}`")))?
            .parse()
            .map_err(|e| Error::Checkpoint(format!("meta `{key}`: {e}")))
    }
}
