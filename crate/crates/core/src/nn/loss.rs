//! Huber loss: quadratic for small residuals, linear beyond the threshold α.

use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};

/// Threshold between the quadratic and linear regimes.
#[derive(Debug, Clone, Copy)]
pub struct HuberConfig {
    pub alpha: f64,
}

pub const HUBER_ALPHA_DEFAULT: f64 = 1.2;

impl Default for HuberConfig {
    fn default() -> Self {
        HuberConfig {
            alpha: HUBER_ALPHA_DEFAULT,
        }
    }
}

impl HuberConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!(
                "Huber alpha must be positive, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

fn check_lengths(x: ArrayView1<f64>, y: ArrayView1<f64>, context: &str) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::shape(context, x.len(), y.len()));
    }
    Ok(())
}

/// Mean over elements of ½r² for |r| < α, else α|r| − ½α², with r = x − y.
pub fn huber_loss(x: ArrayView1<f64>, y: ArrayView1<f64>, cfg: HuberConfig) -> Result<f64> {
    check_lengths(x, y, "huber_loss")?;
    let alpha = cfg.alpha;
    let total: f64 = x
        .iter()
        .zip(y.iter())
        .map(|(&a, &b)| {
            let r = a - b;
            if r.abs() < alpha {
                0.5 * r * r
            } else {
                alpha * r.abs() - 0.5 * alpha * alpha
            }
        })
        .sum();
    Ok(total / x.len() as f64)
}

/// Gradient of [`huber_loss`] with respect to `x`: per element r for
/// |r| < α, else α·sign(r), scaled by 1/N for the mean reduction.
pub fn huber_grad(
    x: ArrayView1<f64>,
    y: ArrayView1<f64>,
    cfg: HuberConfig,
) -> Result<Array1<f64>> {
    check_lengths(x, y, "huber_grad")?;
    let alpha = cfg.alpha;
    let inv_n = 1.0 / x.len() as f64;
    Ok(Array1::from_shape_fn(x.len(), |i| {
        let r = x[i] - y[i];
        let g = if r.abs() < alpha {
            r
        } else {
            alpha * r.signum()
        };
        g * inv_n
    }))
}
