//! The universal 2-D data carrier and a few amplitude statistics.
//!
//! Convention used throughout the crate: rows are time samples, columns are
//! channels (traces). Velocity-model grids reuse the same type with rows as
//! depth cells and columns as horizontal cells.

use ndarray::Array2;

use crate::error::{Error, Result};

/// A rows×cols array of real samples (shot gather, noise record, velocity
/// field). Row-major storage.
pub type Grid2D = Array2<f64>;

/// Root-mean-square amplitude over all samples.
pub fn rms(grid: &Grid2D) -> f64 {
    if grid.is_empty() {
        return 0.0;
    }
    (grid.iter().map(|v| v * v).sum::<f64>() / grid.len() as f64).sqrt()
}

/// Frobenius norm.
pub fn frob_norm(grid: &Grid2D) -> f64 {
    grid.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Mean and population standard deviation over all samples.
pub fn mean_std(grid: &Grid2D) -> (f64, f64) {
    let n = grid.len() as f64;
    let mean = grid.sum() / n;
    let var = grid.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Error unless every sample is finite.
pub fn ensure_finite(grid: &Grid2D, context: &str) -> Result<()> {
    match grid.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(idx) => {
            let cols = grid.ncols();
            Err(Error::numeric(
                context,
                format!("non-finite sample at ({}, {})", idx / cols, idx % cols),
            ))
        }
    }
}
