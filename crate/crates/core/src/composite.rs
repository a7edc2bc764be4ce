//! Feed-forward composite models and their intermediate representations.
//!
//! A model is a chain of dense layers `h ↦ σ(h W + b)`. The first `L`
//! layers define the intermediate spaces whose post-activation outputs
//! `e_k(x)` feed the ensemble; the last layer maps to the scalar output.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::matrix::{Matrix, ShapeError};
use crate::vecchia::{EmbeddingDataset, VecchiaError};

pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;

#[derive(Debug, Error)]
pub enum CompositeError {
    #[error("layer {layer}: {what}")]
    Layer { layer: usize, what: String },
    #[error("input has dimension {found}, model expects {expected}")]
    InputDimension { expected: usize, found: usize },
    #[error("{rows} input rows but {responses} responses")]
    RowMismatch { rows: usize, responses: usize },
    #[error("layer index {index} outside 0..={layers}")]
    LayerIndex { index: usize, layers: usize },
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("invalid training setup: {0}")]
    InvalidTraining(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Dataset(#[from] VecchiaError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Activation {
    Selu,
    Relu,
    LeakyRelu { slope: f64 },
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Selu => {
                if z > 0.0 {
                    SELU_LAMBDA * z
                } else {
                    SELU_LAMBDA * SELU_ALPHA * z.exp_m1()
                }
            }
            Activation::Relu => z.max(0.0),
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            Activation::Identity => z,
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Selu => {
                if z > 0.0 {
                    SELU_LAMBDA
                } else {
                    SELU_LAMBDA * SELU_ALPHA * z.exp()
                }
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Identity => 1.0,
        }
    }

    fn tag(self) -> (u8, f64) {
        match self {
            Activation::Selu => (0, 0.0),
            Activation::Relu => (1, 0.0),
            Activation::LeakyRelu { slope } => (2, slope),
            Activation::Identity => (3, 0.0),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "selu" => Ok(Activation::Selu),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            _ => match s.strip_prefix("leaky-relu") {
                Some("") => Ok(Activation::LeakyRelu { slope: 0.01 }),
                Some(rest) => rest
                    .strip_prefix(':')
                    .and_then(|v| v.parse().ok())
                    .map(|slope| Activation::LeakyRelu { slope })
                    .ok_or_else(|| format!("bad leaky-relu slope in '{s}'")),
                None => Err(format!("unknown activation '{s}'")),
            },
        }
    }
}

/// Dense layer `σ(h W + b)` with `W` of shape `d_in × d_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self, CompositeError> {
        if bias.len() != weight.cols() {
            return Err(CompositeError::Layer {
                layer: 0,
                what: format!("bias length {} does not match {} output units", bias.len(), weight.cols()),
            });
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }

    /// Pre-activation `h W + b`.
    fn affine(&self, h: &[f64]) -> Vec<f64> {
        let mut z = self.bias.clone();
        for (i, &hi) in h.iter().enumerate() {
            if hi != 0.0 {
                for (zj, wij) in z.iter_mut().zip(self.weight.row(i)) {
                    *zj += hi * wij;
                }
            }
        }
        z
    }

    pub fn forward(&self, h: &[f64]) -> Vec<f64> {
        let mut z = self.affine(h);
        for v in z.iter_mut() {
            *v = self.activation.apply(*v);
        }
        z
    }
}

/// Result of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Forward {
    /// `e_1(x) .. e_L(x)`, post-activation.
    pub intermediates: Vec<Vec<f64>>,
    pub output: f64,
}

/// A chain of `L + 1` dense layers ending in a single output unit.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeModel {
    layers: Vec<LayerSpec>,
}

impl CompositeModel {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self, CompositeError> {
        if layers.is_empty() {
            return Err(CompositeError::Layer {
                layer: 0,
                what: "model needs at least one layer".into(),
            });
        }
        for (k, l) in layers.iter().enumerate() {
            if l.bias.len() != l.d_out() {
                return Err(CompositeError::Layer {
                    layer: k,
                    what: format!("bias length {} does not match {} output units", l.bias.len(), l.d_out()),
                });
            }
            if let Some(next) = layers.get(k + 1) {
                if l.d_out() != next.d_in() {
                    return Err(CompositeError::Layer {
                        layer: k + 1,
                        what: format!("input dimension {} does not chain from {}", next.d_in(), l.d_out()),
                    });
                }
            }
            if l.weight.first_non_finite().is_some() || l.bias.iter().any(|b| !b.is_finite()) {
                return Err(CompositeError::Layer {
                    layer: k,
                    what: "non-finite parameter".into(),
                });
            }
        }
        let last = layers.len() - 1;
        if layers[last].d_out() != 1 {
            return Err(CompositeError::Layer {
                layer: last,
                what: format!("final layer must have one output, has {}", layers[last].d_out()),
            });
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in()
    }

    /// Number of intermediate spaces `L`.
    pub fn n_intermediate(&self) -> usize {
        self.layers.len() - 1
    }

    /// Dimension `d_k` of each intermediate space.
    pub fn intermediate_dims(&self) -> Vec<usize> {
        self.layers[..self.n_intermediate()].iter().map(|l| l.d_out()).collect()
    }

    fn check_input(&self, x: &[f64]) -> Result<(), CompositeError> {
        if x.len() != self.input_dim() {
            return Err(CompositeError::InputDimension {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward, CompositeError> {
        self.check_input(x)?;
        let mut intermediates = Vec::with_capacity(self.n_intermediate());
        let mut h = x.to_vec();
        for l in &self.layers[..self.n_intermediate()] {
            h = l.forward(&h);
            intermediates.push(h.clone());
        }
        let output = self.layers[self.n_intermediate()].forward(&h)[0];
        Ok(Forward { intermediates, output })
    }

    /// `e_k(x)`; `k = 0` is the input itself.
    pub fn intermediate(&self, x: &[f64], k: usize) -> Result<Vec<f64>, CompositeError> {
        self.check_input(x)?;
        if k > self.n_intermediate() {
            return Err(CompositeError::LayerIndex {
                index: k,
                layers: self.n_intermediate(),
            });
        }
        Ok(self.layers[..k].iter().fold(x.to_vec(), |h, l| l.forward(&h)))
    }

    /// Distance between two inputs measured in intermediate space `k`:
    /// `‖e_k(a) − e_k(b)‖`. For injective layers this is a metric on inputs.
    pub fn induced_distance(&self, a: &[f64], b: &[f64], k: usize) -> Result<f64, CompositeError> {
        let ea = self.intermediate(a, k)?;
        let eb = self.intermediate(b, k)?;
        Ok(crate::matrix::sq_dist(&ea, &eb).sqrt())
    }

    /// Network outputs for every row.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>, CompositeError> {
        x.row_iter().map(|r| self.forward(r).map(|f| f.output)).collect()
    }

    /// Per-layer embedding matrices `E_1..E_L` for the rows of `x`.
    pub fn embed(&self, x: &Matrix) -> Result<Vec<Matrix>, CompositeError> {
        if x.cols() != self.input_dim() && x.rows() > 0 {
            return Err(CompositeError::InputDimension {
                expected: self.input_dim(),
                found: x.cols(),
            });
        }
        let dims = self.intermediate_dims();
        let mut data: Vec<Vec<f64>> = dims.iter().map(|d| Vec::with_capacity(d * x.rows())).collect();
        for r in x.row_iter() {
            let f = self.forward(r)?;
            for (buf, e) in data.iter_mut().zip(f.intermediates) {
                buf.extend(e);
            }
        }
        dims.iter()
            .zip(data)
            .map(|(&d, buf)| Matrix::new(x.rows(), d, buf).map_err(CompositeError::from))
            .collect()
    }

    /// SHA-256 over a canonical little-endian encoding of the architecture
    /// and parameters, rendered as `sha256:<hex>`.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"DVE-MODEL\x01");
        h.update((self.layers.len() as u64).to_le_bytes());
        for l in &self.layers {
            let (tag, slope) = l.activation.tag();
            h.update([tag]);
            h.update(slope.to_le_bytes());
            h.update((l.d_in() as u64).to_le_bytes());
            h.update((l.d_out() as u64).to_le_bytes());
            for v in l.weight.as_slice().iter().chain(&l.bias) {
                h.update(v.to_le_bytes());
            }
        }
        format!("sha256:{}", hex::encode(h.finalize()))
    }
}

/// One dataset per intermediate space, all sharing the response vector and
/// the row order of `x`.
pub fn extract_datasets(model: &CompositeModel, x: &Matrix, y: &[f64]) -> Result<Vec<EmbeddingDataset>, CompositeError> {
    if x.rows() != y.len() {
        return Err(CompositeError::RowMismatch {
            rows: x.rows(),
            responses: y.len(),
        });
    }
    let responses = Arc::new(y.to_vec());
    model
        .embed(x)?
        .into_iter()
        .enumerate()
        .map(|(k, e)| EmbeddingDataset::new(Arc::new(e), responses.clone(), k + 1).map_err(CompositeError::from))
        .collect()
}

/// Settings for [`train_toy_mlp`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Hidden widths; a linear output unit is appended.
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(layer_dims: &[usize], activation: Activation, epochs: usize, learning_rate: f64, seed: u64) -> Self {
        Self {
            layer_dims: layer_dims.to_vec(),
            activation,
            epochs,
            learning_rate,
            momentum: 0.9,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: CompositeModel,
    /// Training MSE of the returned model.
    pub final_mse: f64,
    /// Training MSE before each epoch's update.
    pub loss_trace: Vec<f64>,
}

/// LeCun-normal weights (`sd = 1/√fan_in`) and zero biases.
fn init_layers(input_dim: usize, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<LayerSpec> {
    let mut dims = vec![input_dim];
    dims.extend(&cfg.layer_dims);
    dims.push(1);
    let n_layers = dims.len() - 1;
    (0..n_layers)
        .map(|k| {
            let (din, dout) = (dims[k], dims[k + 1]);
            let normal = Normal::new(0.0, 1.0 / (din as f64).sqrt()).expect("positive sd");
            let w: Vec<f64> = (0..din * dout).map(|_| normal.sample(rng)).collect();
            let activation = if k + 1 == n_layers { Activation::Identity } else { cfg.activation };
            LayerSpec {
                weight: Matrix::new(din, dout, w).expect("shape"),
                bias: vec![0.0; dout],
                activation,
            }
        })
        .collect()
}

/// Full-batch forward pass keeping pre-activations for backprop.
fn batch_forward(layers: &[LayerSpec], x: &Matrix) -> (Vec<Matrix>, Vec<Matrix>) {
    let mut pre = Vec::with_capacity(layers.len());
    let mut post = Vec::with_capacity(layers.len() + 1);
    post.push(x.clone());
    for l in layers {
        let h = post.last().expect("input");
        let mut z = Matrix::zeros(h.rows(), l.d_out());
        let mut a = Matrix::zeros(h.rows(), l.d_out());
        for r in 0..h.rows() {
            let zr = l.affine(h.row(r));
            for (j, v) in zr.into_iter().enumerate() {
                z[(r, j)] = v;
                a[(r, j)] = l.activation.apply(v);
            }
        }
        pre.push(z);
        post.push(a);
    }
    (pre, post)
}

fn mse(out: &Matrix, y: &[f64]) -> f64 {
    out.as_slice().iter().zip(y).map(|(o, t)| (o - t) * (o - t)).sum::<f64>() / y.len() as f64
}

/// Trains a small fully connected regressor with full-batch gradient descent
/// and classical momentum on mean squared error. Deterministic per seed.
pub fn train_toy_mlp(x: &Matrix, y: &[f64], cfg: &TrainConfig) -> Result<TrainedModel, CompositeError> {
    if cfg.layer_dims.is_empty() || cfg.layer_dims.contains(&0) {
        return Err(CompositeError::InvalidTraining("layer_dims must be non-empty and positive".into()));
    }
    if x.rows() != y.len() {
        return Err(CompositeError::RowMismatch {
            rows: x.rows(),
            responses: y.len(),
        });
    }
    if x.rows() < 2 {
        return Err(CompositeError::InvalidTraining("need at least two observations".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut layers = init_layers(x.cols(), cfg, &mut rng);
    let mut vel_w: Vec<Matrix> = layers.iter().map(|l| Matrix::zeros(l.d_in(), l.d_out())).collect();
    let mut vel_b: Vec<Vec<f64>> = layers.iter().map(|l| vec![0.0; l.d_out()]).collect();
    let n = x.rows();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let (pre, post) = batch_forward(&layers, x);
        let out = post.last().expect("output");
        let loss = mse(out, y);
        if !loss.is_finite() {
            return Err(CompositeError::Diverged { epoch, loss });
        }
        trace.push(loss);

        // dL/d(output) for mean squared error
        let mut delta = Matrix::new(n, 1, out.as_slice().iter().zip(y).map(|(o, t)| 2.0 * (o - t) / n as f64).collect())?;
        for k in (0..layers.len()).rev() {
            let l = &layers[k];
            for r in 0..n {
                for j in 0..l.d_out() {
                    delta[(r, j)] *= l.activation.derivative(pre[k][(r, j)]);
                }
            }
            let h = &post[k];
            let mut gw = Matrix::zeros(l.d_in(), l.d_out());
            let mut gb = vec![0.0; l.d_out()];
            for r in 0..n {
                let hr = h.row(r);
                let dr = delta.row(r);
                for (i, &hi) in hr.iter().enumerate() {
                    for (g, &dj) in gw.row_mut(i).iter_mut().zip(dr) {
                        *g += hi * dj;
                    }
                }
                for (g, &dj) in gb.iter_mut().zip(dr) {
                    *g += dj;
                }
            }
            if k > 0 {
                let mut prev = Matrix::zeros(n, l.d_in());
                for r in 0..n {
                    for i in 0..l.d_in() {
                        prev[(r, i)] = crate::matrix::dot(delta.row(r), l.weight.row(i));
                    }
                }
                delta = prev;
            }
            let l = &mut layers[k];
            for ((w, v), g) in l.weight_mut().iter_mut().zip(vel_w[k].as_mut_slice()).zip(gw.as_slice()) {
                *v = cfg.momentum * *v - cfg.learning_rate * g;
                *w += *v;
            }
            for ((b, v), g) in l.bias.iter_mut().zip(vel_b[k].iter_mut()).zip(&gb) {
                *v = cfg.momentum * *v - cfg.learning_rate * g;
                *b += *v;
            }
        }
    }

    let model = CompositeModel::new(layers).map_err(|e| match e {
        CompositeError::Layer { .. } => CompositeError::Diverged {
            epoch: cfg.epochs,
            loss: f64::NAN,
        },
        other => other,
    })?;
    let final_mse = mse(&Matrix::column(&model.predict(x)?), y);
    if !final_mse.is_finite() {
        return Err(CompositeError::Diverged {
            epoch: cfg.epochs,
            loss: final_mse,
        });
    }
    Ok(TrainedModel {
        model,
        final_mse,
        loss_trace: trace,
    })
}

impl LayerSpec {
    fn weight_mut(&mut self) -> &mut [f64] {
        self.weight.as_mut_slice()
    }
}

/// Samples the S-curve manifold: `t ~ U(−3π/2, 3π/2)`, `u ~ U(0, 2)`,
/// `x = (sin t, u, sign(t)(cos t − 1))`, response `t + N(0, noise_sd²)`.
pub fn make_scurve(n: usize, noise_sd: f64, seed: u64) -> (Matrix, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(3 * n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let t = 3.0 * std::f64::consts::PI * (rng.random::<f64>() - 0.5);
        let u = 2.0 * rng.random::<f64>();
        let eps: f64 = StandardNormal.sample(&mut rng);
        data.extend([t.sin(), u, t.signum() * (t.cos() - 1.0)]);
        y.push(t + noise_sd * eps);
    }
    (Matrix::new(n, 3, data).expect("shape"), y)
}
