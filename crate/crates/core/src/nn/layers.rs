//! Dense, layer-norm, leaky-ReLU, and dropout primitives with analytic
//! backward passes.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// An affine transform `y = W x + b` with `W: out_dim × in_dim`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    /// Glorot-uniform weights in ±sqrt(6/(in+out)), zero bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights =
            Array2::from_shape_fn((out_dim, in_dim), |_| rng.random_range(-limit..limit));
        DenseLayer {
            weights,
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::shape("dense forward", self.in_dim(), x.len()));
        }
        Ok(self.weights.dot(&x) + &self.bias)
    }

    /// Accumulates parameter gradients into `gw`/`gb` and returns the
    /// gradient with respect to the input.
    pub fn backward_into(
        &self,
        x: ArrayView1<f64>,
        grad_out: ArrayView1<f64>,
        gw: &mut Array2<f64>,
        gb: &mut Array1<f64>,
    ) -> Array1<f64> {
        debug_assert_eq!(x.len(), self.in_dim());
        debug_assert_eq!(grad_out.len(), self.out_dim());
        for (i, &g) in grad_out.iter().enumerate() {
            let mut row = gw.row_mut(i);
            row.scaled_add(g, &x);
            gb[i] += g;
        }
        self.weights.t().dot(&grad_out)
    }
}

/// Layer normalization over one feature vector: `γ·(x−μ)/sqrt(σ²+ε) + β`
/// with μ and σ² the mean and population variance of the vector.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub eps: f64,
}

/// Forward-pass values the layer-norm backward pass needs.
#[derive(Debug, Clone)]
pub struct LnCache {
    pub xhat: Array1<f64>,
    pub inv_std: f64,
}

pub const LN_EPS_DEFAULT: f64 = 1e-5;

impl LayerNorm {
    /// γ = 1, β = 0, ε = 1e-5.
    pub fn identity(dim: usize) -> Self {
        LayerNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            eps: LN_EPS_DEFAULT,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Result<(Array1<f64>, LnCache)> {
        if x.len() != self.dim() {
            return Err(Error::shape("layer-norm forward", self.dim(), x.len()));
        }
        let n = x.len() as f64;
        let mean = x.sum() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + self.eps).sqrt();
        let xhat = x.mapv(|v| (v - mean) * inv_std);
        let y = &xhat * &self.gamma + &self.beta;
        Ok((y, LnCache { xhat, inv_std }))
    }

    /// Accumulates γ/β gradients and returns the input gradient.
    pub fn backward_into(
        &self,
        cache: &LnCache,
        grad_out: ArrayView1<f64>,
        ggamma: &mut Array1<f64>,
        gbeta: &mut Array1<f64>,
    ) -> Array1<f64> {
        let n = grad_out.len() as f64;
        // h = dL/dxhat
        let h = &grad_out * &self.gamma;
        let h_mean = h.sum() / n;
        let hx_mean = h
            .iter()
            .zip(cache.xhat.iter())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / n;
        for i in 0..grad_out.len() {
            ggamma[i] += grad_out[i] * cache.xhat[i];
            gbeta[i] += grad_out[i];
        }
        Array1::from_shape_fn(grad_out.len(), |i| {
            cache.inv_std * (h[i] - h_mean - cache.xhat[i] * hx_mean)
        })
    }
}

/// Slope for negative inputs; the paper fixes λ = 0.2.
#[derive(Debug, Clone, Copy)]
pub struct LeakyReluConfig {
    pub lambda: f64,
}

pub const LEAKY_RELU_LAMBDA_DEFAULT: f64 = 0.2;

impl Default for LeakyReluConfig {
    fn default() -> Self {
        LeakyReluConfig {
            lambda: LEAKY_RELU_LAMBDA_DEFAULT,
        }
    }
}

impl LeakyReluConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "leaky-ReLU slope must satisfy 0 <= lambda < 1, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Elementwise `max(λ·x, x)`.
pub fn leaky_relu(x: ArrayView1<f64>, cfg: LeakyReluConfig) -> Array1<f64> {
    x.mapv(|v| (cfg.lambda * v).max(v))
}

/// Derivative of leaky ReLU with respect to its input, given that input.
pub fn leaky_relu_grad(x: ArrayView1<f64>, cfg: LeakyReluConfig) -> Array1<f64> {
    x.mapv(|v| if v < 0.0 { cfg.lambda } else { 1.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    Eval,
}

/// Inverted dropout: each element zeroed with probability `rate`, survivors
/// scaled by 1/(1−rate). Mask sequences are deterministic under a fixed
/// seed.
#[derive(Debug, Clone, Copy)]
pub struct DropoutConfig {
    pub rate: f64,
    pub seed: u64,
    pub mode: DropoutMode,
}

pub const DROPOUT_RATE_DEFAULT: f64 = 0.1;

impl DropoutConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(Error::Config(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.rate
            )));
        }
        Ok(())
    }

    /// The mask RNG this config seeds.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Returns the dropped-out vector and the scaled mask (entries 0 or
/// 1/(1−rate)) for the backward pass. Eval mode is the exact identity with
/// an all-ones mask.
pub fn dropout_forward(
    x: ArrayView1<f64>,
    rate: f64,
    mode: DropoutMode,
    rng: &mut impl Rng,
) -> (Array1<f64>, Array1<f64>) {
    if mode == DropoutMode::Eval || rate == 0.0 {
        return (x.to_owned(), Array1::ones(x.len()));
    }
    let keep_scale = 1.0 / (1.0 - rate);
    let mask = Array1::from_shape_fn(x.len(), |_| {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            keep_scale
        }
    });
    (&x * &mask, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn dense_identity_passthrough() {
        let layer = DenseLayer {
            weights: Array2::eye(3),
            bias: Array1::zeros(3),
        };
        let y = layer.forward(array![1.0, 2.0, 3.0].view()).unwrap();
        assert_eq!(y, array![1.0, 2.0, 3.0]);
    }

    #[test]
    fn dense_hand_evaluated() {
        let layer = DenseLayer {
            weights: array![[2.0]],
            bias: array![1.0],
        };
        let y = layer.forward(array![3.0].view()).unwrap();
        assert_eq!(y, array![7.0]);
    }

    #[test]
    fn dense_zero_input_returns_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = DenseLayer::init(4, 2, &mut rng);
        let y = layer.forward(Array1::zeros(4).view()).unwrap();
        assert_eq!(y, layer.bias);
    }

    #[test]
    fn dense_shape_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = DenseLayer::init(4, 2, &mut rng);
        assert!(matches!(
            layer.forward(Array1::zeros(3).view()),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn dense_bias_grad_is_ones_for_sum_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = DenseLayer::init(3, 2, &mut rng);
        let x = array![0.3, -0.4, 1.1];
        let mut gw = Array2::zeros((2, 3));
        let mut gb = Array1::zeros(2);
        // loss = sum(output) -> upstream gradient of ones
        layer.backward_into(x.view(), array![1.0, 1.0].view(), &mut gw, &mut gb);
        assert_eq!(gb, array![1.0, 1.0]);
    }

    #[test]
    fn layer_norm_constant_input_zeros() {
        let ln = LayerNorm::identity(5);
        let (y, _) = ln.forward(Array1::from_elem(5, 3.7).view()).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn layer_norm_two_point_hand_case() {
        let mut ln = LayerNorm::identity(2);
        ln.eps = 1e-12;
        // mu = 2, sigma^2 = 1 -> normalized to [-1, 1]
        let (y, _) = ln.forward(array![1.0, 3.0].view()).unwrap();
        assert!((y[0] + 1.0).abs() < 1e-6);
        assert!((y[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_gamma_zero_gives_beta() {
        let ln = LayerNorm {
            gamma: Array1::zeros(3),
            beta: Array1::from_elem(3, 0.25),
            eps: LN_EPS_DEFAULT,
        };
        let (y, _) = ln.forward(array![5.0, -2.0, 0.1].view()).unwrap();
        assert!(y.iter().all(|v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn layer_norm_output_standardized() {
        // input variance must dwarf eps for unit output variance
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ln = LayerNorm::identity(64);
        let x = Array1::from_shape_fn(64, |_| rng.random_range(-50.0..50.0));
        let (y, _) = ln.forward(x.view()).unwrap();
        let mean = y.sum() / 64.0;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn leaky_relu_cases() {
        let cfg = LeakyReluConfig::default();
        let y = leaky_relu(array![3.0, -1.0, 0.0].view(), cfg);
        assert_eq!(y, array![3.0, -0.2, 0.0]);
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = array![1.0, -2.0, 3.0];
        let (y, mask) = dropout_forward(x.view(), 0.0, DropoutMode::Train, &mut rng);
        assert_eq!(y, x);
        assert!(mask.iter().all(|&m| m == 1.0));
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = array![1.0, -2.0, 3.0];
        let (y, _) = dropout_forward(x.view(), 0.9, DropoutMode::Eval, &mut rng);
        assert_eq!(y, x);
    }

    #[test]
    fn dropout_preserves_expectation() {
        // Monte-Carlo check that inverted scaling keeps the sample mean.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 200_000;
        let x = Array1::from_elem(n, 1.0);
        let (y, _) = dropout_forward(x.view(), 0.5, DropoutMode::Train, &mut rng);
        let mean_in = x.sum() / n as f64;
        let mean_out = y.sum() / n as f64;
        assert!(
            (mean_out - mean_in).abs() / mean_in < 0.05,
            "expectation drifted: {mean_out} vs {mean_in}"
        );
    }

    #[test]
    fn dropout_same_seed_same_masks() {
        let cfg = DropoutConfig {
            rate: 0.3,
            seed: 99,
            mode: DropoutMode::Train,
        };
        let x = Array1::linspace(0.0, 1.0, 32);
        let run = |cfg: &DropoutConfig| {
            let mut rng = cfg.rng();
            (0..4)
                .map(|_| dropout_forward(x.view(), cfg.rate, cfg.mode, &mut rng).1)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(&cfg), run(&cfg));
    }
}
