//! Deep reward function: an MLP with ReLU hidden layers and a scalar linear
//! output, mapping a state's feature vector to its reward.

use base64::Engine;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::World;
use crate::error::{CoreError, Result};

pub const DEFAULT_WIDTH: usize = 64;
pub const DEFAULT_DEPTH: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `(out, in)`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    layers: Vec<Dense>,
}

/// Partial derivatives aligned with [`RewardModel::theta`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientRecord {
    pub values: Vec<f64>,
}

impl GradientRecord {
    pub fn zeros(n: usize) -> Self {
        GradientRecord { values: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.values.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    pub fn add_assign(&mut self, other: &GradientRecord) {
        assert_eq!(self.len(), other.len(), "gradient shape mismatch");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.values.iter_mut().for_each(|v| *v *= k);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl RewardModel {
    /// Fan-in scaled uniform weights, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
    /// and zero biases. `depth` counts hidden layers.
    pub fn init(seed: u64, input_dim: usize, width: usize, depth: usize) -> Result<RewardModel> {
        if input_dim == 0 {
            return Err(CoreError::Invalid("reward model input dimension must be positive".into()));
        }
        if depth > 0 && width == 0 {
            return Err(CoreError::Invalid("hidden width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![input_dim];
        dims.extend(std::iter::repeat_n(width, depth));
        dims.push(1);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let weights = Array2::from_shape_fn((fan_out, fan_in), |_| rng.gen_range(-bound..bound));
                Dense { weights, bias: Array1::zeros(fan_out) }
            })
            .collect();
        Ok(RewardModel { layers })
    }

    /// Depth-0 model `w . x + b`.
    pub fn linear(weights: &[f64], bias: f64) -> RewardModel {
        RewardModel {
            layers: vec![Dense {
                weights: Array2::from_shape_vec((1, weights.len()), weights.to_vec()).expect("row vector"),
                bias: Array1::from_elem(1, bias),
            }],
        }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<RewardModel> {
        if layers.is_empty() {
            return Err(CoreError::Empty("model layers"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weights.nrows() {
                return Err(CoreError::Invalid(format!("layer {i}: bias length disagrees with weights")));
            }
            if i + 1 < layers.len() && layers[i + 1].weights.ncols() != l.weights.nrows() {
                return Err(CoreError::Invalid(format!("layer {} input does not chain from layer {i}", i + 1)));
            }
        }
        if layers.last().expect("non-empty").weights.nrows() != 1 {
            return Err(CoreError::Invalid("output layer must be scalar".into()));
        }
        Ok(RewardModel { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    /// Number of hidden layers.
    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.weights.nrows()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::num_params).sum()
    }

    /// Flat parameter view: per layer, row-major weights then bias.
    pub fn theta(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_theta(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.num_params() {
            return Err(CoreError::DimensionMismatch { expected: self.num_params(), got: theta.len() });
        }
        let mut i = 0;
        for l in &mut self.layers {
            for w in l.weights.iter_mut() {
                *w = theta[i];
                i += 1;
            }
            for b in l.bias.iter_mut() {
                *b = theta[i];
                i += 1;
            }
        }
        Ok(())
    }

    pub fn with_theta(&self, theta: &[f64]) -> Result<RewardModel> {
        let mut m = self.clone();
        m.set_theta(theta)?;
        Ok(m)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.input_dim() {
            return Err(CoreError::DimensionMismatch { expected: self.input_dim(), got });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x.len())?;
        let xs = ArrayView2::from_shape((1, x.len()), x).expect("row");
        Ok(self.forward_batch(xs)?[0])
    }

    /// Rewards for each row of `xs` (`(n, d)`).
    pub fn forward_batch(&self, xs: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.check_dim(xs.ncols())?;
        let mut a = xs.to_owned();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = a.dot(&l.weights.t());
            z += &l.bias;
            if i + 1 < self.layers.len() {
                z.mapv_inplace(|v| v.max(0.0));
            }
            a = z;
        }
        Ok(a.index_axis_move(Axis(1), 0))
    }

    /// Reward of every state in `world`, in state order.
    pub fn rewards(&self, world: &World) -> Result<Vec<f64>> {
        let xs = feature_matrix(world);
        Ok(self.forward_batch(xs.view())?.to_vec())
    }

    /// Gradient of `upstream * reward(x)` with respect to every parameter.
    pub fn backward(&self, x: &[f64], upstream: f64) -> Result<GradientRecord> {
        self.check_dim(x.len())?;
        let xs = ArrayView2::from_shape((1, x.len()), x).expect("row");
        self.backward_batch(xs, &[upstream])
    }

    /// Gradient of `sum_i upstream[i] * reward(xs[i])`.
    pub fn backward_batch(&self, xs: ArrayView2<f64>, upstream: &[f64]) -> Result<GradientRecord> {
        self.check_dim(xs.ncols())?;
        if upstream.len() != xs.nrows() {
            return Err(CoreError::DimensionMismatch { expected: xs.nrows(), got: upstream.len() });
        }
        let n_layers = self.layers.len();
        // activations[i] is the input to layer i; pre[i] its pre-activation.
        let mut activations = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers);
        let mut a = xs.to_owned();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = a.dot(&l.weights.t());
            z += &l.bias;
            let next = if i + 1 < n_layers { z.mapv(|v| v.max(0.0)) } else { z.clone() };
            activations.push(a);
            pre.push(z);
            a = next;
        }

        let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(n_layers);
        let mut delta = Array2::from_shape_vec((upstream.len(), 1), upstream.to_vec()).expect("column");
        for i in (0..n_layers).rev() {
            let gw = delta.t().dot(&activations[i]);
            let gb = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut back = delta.dot(&self.layers[i].weights);
                ndarray::Zip::from(&mut back).and(&pre[i - 1]).for_each(|d, &z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = back;
            }
            grads.push((gw, gb));
        }
        grads.reverse();

        let mut values = Vec::with_capacity(self.num_params());
        for (gw, gb) in grads {
            values.extend(gw.iter());
            values.extend(gb.iter());
        }
        Ok(GradientRecord { values })
    }

    /// Gradient of the zero-mean Gaussian log prior: `-lambda * theta`.
    pub fn prior_gradient(&self, lambda: f64) -> GradientRecord {
        GradientRecord { values: self.theta().into_iter().map(|t| -lambda * t).collect() }
    }

    /// `-lambda / 2 * |theta|^2`, up to an additive constant.
    pub fn log_prior(&self, lambda: f64) -> f64 {
        -0.5 * lambda * self.theta().iter().map(|t| t * t).sum::<f64>()
    }
}

/// `(num_states, d)` matrix of state features.
pub fn feature_matrix(world: &World) -> Array2<f64> {
    let d = world.feature_dim();
    Array2::from_shape_fn((world.num_states(), d), |(s, j)| world.feature_table()[s][j])
}

/// Serialized checkpoint. Parameters appear either as a plain array or as
/// base64 of little-endian `f64`s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub version: u32,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params_b64: Option<String>,
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

impl RewardModel {
    pub fn to_file(&self, base64_params: bool) -> ModelFile {
        let theta = self.theta();
        let (params, params_b64) = if base64_params {
            let bytes: Vec<u8> = theta.iter().flat_map(|v| v.to_le_bytes()).collect();
            (None, Some(base64::engine::general_purpose::STANDARD.encode(bytes)))
        } else {
            (Some(theta), None)
        };
        ModelFile {
            version: MODEL_FORMAT_VERSION,
            input_dim: self.input_dim(),
            hidden: self.hidden_widths(),
            params,
            params_b64,
        }
    }

    pub fn from_file(file: &ModelFile) -> Result<RewardModel> {
        if file.version != MODEL_FORMAT_VERSION {
            return Err(CoreError::Invalid(format!("unsupported model format version {}", file.version)));
        }
        let mut dims = vec![file.input_dim];
        dims.extend(&file.hidden);
        dims.push(1);
        let layers = dims
            .windows(2)
            .map(|w| Dense { weights: Array2::zeros((w[1], w[0])), bias: Array1::zeros(w[1]) })
            .collect();
        let mut model = RewardModel::from_layers(layers)?;
        let theta = match (&file.params, &file.params_b64) {
            (Some(p), None) => p.clone(),
            (None, Some(b)) => {
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(b)
                    .map_err(|e| CoreError::Invalid(format!("bad base64 parameters: {e}")))?;
                if bytes.len() % 8 != 0 {
                    return Err(CoreError::Invalid("base64 parameters are not whole f64s".into()));
                }
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect()
            }
            _ => return Err(CoreError::Invalid("exactly one of params / params_b64 is required".into())),
        };
        model.set_theta(&theta)?;
        if !model.is_finite() {
            return Err(CoreError::Invalid("checkpoint contains non-finite parameters".into()));
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file(false))?)
    }

    pub fn from_json(s: &str) -> Result<RewardModel> {
        RewardModel::from_file(&serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_sized() {
        let a = RewardModel::init(3, 23, 64, 4).unwrap();
        let b = RewardModel::init(3, 23, 64, 4).unwrap();
        assert_eq!(a, b);
        // (23*64 + 64) + 3*(64*64 + 64) + (64 + 1)
        let by_hand = (23 * 64 + 64) + 3 * (64 * 64 + 64) + (64 + 1);
        assert_eq!(by_hand, 14_081);
        assert_eq!(a.num_params(), by_hand);
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&v| v == 0.0)));
        assert_ne!(a, RewardModel::init(4, 23, 64, 4).unwrap());
    }

    #[test]
    fn depth_zero_is_linear() {
        let m = RewardModel::init(1, 3, 64, 0).unwrap();
        assert_eq!(m.num_params(), 4);
        let w = m.theta();
        let x = [0.2, 0.5, 0.9];
        let expected = w[0] * x[0] + w[1] * x[1] + w[2] * x[2] + w[3];
        assert!((m.forward(&x).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn forward_examples() {
        let mut m = RewardModel::init(9, 4, 5, 2).unwrap();
        m.set_theta(&vec![0.0; m.num_params()]).unwrap();
        assert_eq!(m.forward(&[0.3, 0.1, 0.9, 0.4]).unwrap(), 0.0);

        let lin = RewardModel::linear(&[0.0, 1.0, 0.0], 0.0);
        assert_eq!(lin.forward(&[0.2, 0.7, 0.1]).unwrap(), 0.7);

        // One hidden unit with weight -1 on input 1: ReLU clamps to 0.
        let m = RewardModel::from_layers(vec![
            Dense { weights: Array2::from_elem((1, 1), -1.0), bias: Array1::zeros(1) },
            Dense { weights: Array2::from_elem((1, 1), 5.0), bias: Array1::from_elem(1, 0.25) },
        ])
        .unwrap();
        assert_eq!(m.forward(&[1.0]).unwrap(), 0.25);

        assert!(matches!(m.forward(&[1.0, 2.0]), Err(CoreError::DimensionMismatch { .. })));
    }

    #[test]
    fn backward_examples() {
        let m = RewardModel::init(2, 3, 4, 2).unwrap();
        let g = m.backward(&[0.1, 0.2, 0.3], 0.0).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
        assert_eq!(g.len(), m.num_params());

        let lin = RewardModel::linear(&[0.5, -1.0], 0.3);
        let g = lin.backward(&[0.4, 0.8], 2.0).unwrap();
        assert_eq!(g.values, vec![0.8, 1.6, 2.0]);
    }

    #[test]
    fn batch_backward_accumulates() {
        let m = RewardModel::init(5, 3, 4, 2).unwrap();
        let xs = [[0.1, 0.9, 0.3], [0.7, 0.2, 0.5]];
        let up = [0.7, -1.3];
        let batch = Array2::from_shape_fn((2, 3), |(i, j)| xs[i][j]);
        let g = m.backward_batch(batch.view(), &up).unwrap();
        let mut sum = m.backward(&xs[0], up[0]).unwrap();
        sum.add_assign(&m.backward(&xs[1], up[1]).unwrap());
        for (a, b) in g.values.iter().zip(&sum.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn prior_examples() {
        let mut m = RewardModel::linear(&[2.0], -3.0);
        assert!(m.prior_gradient(0.0).values.iter().all(|&v| v == 0.0));
        assert_eq!(m.prior_gradient(1.0).values, vec![-2.0, 3.0]);
        // One ascent step on the prior alone shrinks the parameter norm.
        let before: f64 = m.theta().iter().map(|t| t * t).sum();
        let g = m.prior_gradient(0.5);
        let theta: Vec<f64> = m.theta().iter().zip(&g.values).map(|(t, d)| t + 0.1 * d).collect();
        m.set_theta(&theta).unwrap();
        let after: f64 = m.theta().iter().map(|t| t * t).sum();
        assert!(after < before);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = RewardModel::init(7, 5, 6, 3).unwrap();
        let back = RewardModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let b64 = RewardModel::from_file(&m.to_file(true)).unwrap();
        assert_eq!(b64, m);
    }
}
