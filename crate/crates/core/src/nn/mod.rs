//! Framework-free dense-network primitives.
//!
//! Only the fixed set of layer types the denoiser needs: dense (affine),
//! layer normalization, leaky ReLU, inverted dropout, the Huber loss, and
//! the Adam optimizer. Every forward pass has a matching analytic backward
//! pass; gradients are exercised against central finite differences in the
//! test suites. All state is explicit, all functions are deterministic
//! given their inputs and RNG.

mod adam;
mod layers;
mod loss;

pub use adam::{AdamConfig, AdamState};
pub use layers::{
    dropout_forward, leaky_relu, leaky_relu_grad, DenseLayer, DropoutConfig, DropoutMode,
    LayerNorm, LeakyReluConfig, LnCache, DROPOUT_RATE_DEFAULT, LEAKY_RELU_LAMBDA_DEFAULT,
    LN_EPS_DEFAULT,
};
pub use loss::{huber_grad, huber_loss, HuberConfig, HUBER_ALPHA_DEFAULT};
