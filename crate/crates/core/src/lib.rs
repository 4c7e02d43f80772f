//! Denoising toolkit for distributed-acoustic-sensing (DAS) seismic records.
//!
//! The crate covers the full synthetic benchmark pipeline:
//!
//! - [`wavesim`] — 2-D elastic (P-SV) staggered-grid forward modeling on
//!   layered velocity models, producing clean DAS-style shot gathers.
//! - [`noise`] — seeded random (Gaussian) and erratic (impulsive) noise
//!   generators, S/N-calibrated mixing, and the 85/15 synthetic/external
//!   noise blend.
//! - [`patch`] — deterministic tiling of a record into flattened C×C
//!   patches with stride C−D and exact overlap-average reconstruction.
//! - [`nn`] — framework-free dense-network primitives (dense, layer norm,
//!   leaky ReLU, dropout, Huber loss, Adam) with analytic gradients.
//! - [`cpunet`] — the CP-UNet denoiser assembled from those primitives,
//!   its unsupervised training loop, full-record denoising, and the CPUN
//!   checkpoint format.
//! - [`baseline`] — band-pass filter, 2-D median filter, and a plain
//!   dense-autoencoder ablation for comparison.
//! - [`metrics`] — S/N in dB plus MSE/MAE support metrics.
//! - [`io`] — the DGRID binary grid format and PGM heatmap rendering.
//!
//! All random operations are seeded and reproducible; identical seeds and
//! inputs give bit-identical outputs regardless of worker count.

pub mod baseline;
pub mod cpunet;
pub mod error;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod noise;
pub mod patch;
pub mod wavesim;

pub use error::{Error, Result};
pub use grid::Grid2D;
