//! Quantitative evaluation: S/N in dB plus MSE/MAE support metrics.

use crate::error::{Error, Result};
use crate::grid::{frob_norm, Grid2D};

/// Which S/N formula to evaluate.
///
/// `Standard` is the usual power ratio 10·log10(‖X‖²/‖X−X̂‖²).
/// `PaperLiteral` evaluates 20·log10(‖X‖/‖X−X̂‖²), a dimensionally
/// non-standard form kept available behind this flag; the two agree exactly
/// when ‖X−X̂‖ = 1. All benchmark numbers in this crate use `Standard`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SnrConvention {
    #[default]
    Standard,
    PaperLiteral,
}

/// Signal-to-noise ratio of `estimate` against the clean reference, in dB.
/// A zero residual is reported as `f64::INFINITY`.
pub fn snr_db(clean: &Grid2D, estimate: &Grid2D, conv: SnrConvention) -> Result<f64> {
    if clean.dim() != estimate.dim() {
        return Err(Error::shape(
            "snr_db",
            format!("{:?}", clean.dim()),
            format!("{:?}", estimate.dim()),
        ));
    }
    let signal_norm = frob_norm(clean);
    if signal_norm == 0.0 {
        return Err(Error::Usage("snr_db: clean reference is identically zero".into()));
    }
    let residual_norm = frob_norm(&(clean - estimate));
    if residual_norm == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(match conv {
        SnrConvention::Standard => 20.0 * (signal_norm / residual_norm).log10(),
        SnrConvention::PaperLiteral => {
            20.0 * (signal_norm / (residual_norm * residual_norm)).log10()
        }
    })
}

/// Mean squared difference.
pub fn mse(a: &Grid2D, b: &Grid2D) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("mse", format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    let n = a.len() as f64;
    Ok(a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Mean absolute difference.
pub fn mae(a: &Grid2D, b: &Grid2D) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("mae", format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    let n = a.len() as f64;
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}
