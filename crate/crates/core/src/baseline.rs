//! Classical comparison methods: zero-phase band-pass filter and 2-D
//! median filter, plus a plain dense-autoencoder ablation that reuses the
//! unsupervised trainer.

use ndarray::Axis;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::grid::Grid2D;

/// Zero-phase band-pass: unity in [f_lo, f_hi], raised-cosine tapers of
/// `taper_hz` on both edges, zero outside.
#[derive(Debug, Clone, Copy)]
pub struct BandpassConfig {
    pub f_lo_hz: f64,
    pub f_hi_hz: f64,
    pub taper_hz: f64,
    pub sample_rate_hz: f64,
}

impl Default for BandpassConfig {
    fn default() -> Self {
        // Brackets the 30-75 Hz Ricker band used by the forward modeling.
        BandpassConfig {
            f_lo_hz: 10.0,
            f_hi_hz: 120.0,
            taper_hz: 5.0,
            sample_rate_hz: 1000.0,
        }
    }
}

impl BandpassConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::Config("bandpass: sample rate must be positive".into()));
        }
        let nyquist = self.sample_rate_hz / 2.0;
        if !(0.0 <= self.f_lo_hz && self.f_lo_hz < self.f_hi_hz && self.f_hi_hz < nyquist) {
            return Err(Error::Config(format!(
                "bandpass: need 0 <= f_lo < f_hi < Nyquist ({} Hz), got [{}, {}]",
                nyquist, self.f_lo_hz, self.f_hi_hz
            )));
        }
        if self.taper_hz < 0.0 {
            return Err(Error::Config("bandpass: taper width must be >= 0".into()));
        }
        Ok(())
    }

    /// Filter gain at frequency `f` (Hz, non-negative).
    fn gain(&self, f: f64) -> f64 {
        let (lo, hi, w) = (self.f_lo_hz, self.f_hi_hz, self.taper_hz);
        if f >= lo && f <= hi {
            1.0
        } else if w > 0.0 && f < lo && f >= lo - w {
            0.5 * (1.0 + (std::f64::consts::PI * (lo - f) / w).cos())
        } else if w > 0.0 && f > hi && f <= hi + w {
            0.5 * (1.0 + (std::f64::consts::PI * (f - hi) / w).cos())
        } else {
            0.0
        }
    }
}

/// Applies a real symmetric frequency mask to every trace (column) of the
/// record. Zero-phase by construction.
fn apply_freq_mask(data: &Grid2D, mask: &[f64]) -> Grid2D {
    let n = data.nrows();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut out = Grid2D::zeros(data.dim());
    let mut buf: Vec<Complex<f64>> = vec![Complex::default(); n];
    for (j, col) in data.axis_iter(Axis(1)).enumerate() {
        for (b, &v) in buf.iter_mut().zip(col.iter()) {
            *b = Complex::new(v, 0.0);
        }
        fwd.process(&mut buf);
        for (b, &m) in buf.iter_mut().zip(mask.iter()) {
            *b *= m;
        }
        inv.process(&mut buf);
        let scale = 1.0 / n as f64;
        for (i, b) in buf.iter().enumerate() {
            out[(i, j)] = b.re * scale;
        }
    }
    out
}

/// Per-bin |frequency| in Hz for an n-point transform at the given rate.
fn bin_freqs(n: usize, sample_rate_hz: f64) -> Vec<f64> {
    (0..n)
        .map(|k| {
            let k_signed = if k <= n / 2 { k } else { n - k };
            k_signed as f64 * sample_rate_hz / n as f64
        })
        .collect()
}

/// Zero-phase band-pass filter applied per trace.
pub fn bandpass(data: &Grid2D, cfg: &BandpassConfig) -> Result<Grid2D> {
    cfg.validate()?;
    if data.nrows() < 2 {
        return Err(Error::Usage("bandpass: need at least 2 time samples".into()));
    }
    let mask: Vec<f64> = bin_freqs(data.nrows(), cfg.sample_rate_hz)
        .into_iter()
        .map(|f| cfg.gain(f))
        .collect();
    Ok(apply_freq_mask(data, &mask))
}

/// Zero-phase low-pass with a raised-cosine rolloff above `corner_hz`.
/// Used for bandwidth-shaping generated noise.
pub fn lowpass(data: &Grid2D, corner_hz: f64, taper_hz: f64, sample_rate_hz: f64) -> Result<Grid2D> {
    if !(corner_hz > 0.0) {
        return Err(Error::Config("lowpass: corner must be positive".into()));
    }
    if !(sample_rate_hz > 0.0) {
        return Err(Error::Config("lowpass: sample rate must be positive".into()));
    }
    let mask: Vec<f64> = bin_freqs(data.nrows(), sample_rate_hz)
        .into_iter()
        .map(|f| {
            if f <= corner_hz {
                1.0
            } else if taper_hz > 0.0 && f <= corner_hz + taper_hz {
                0.5 * (1.0 + (std::f64::consts::PI * (f - corner_hz) / taper_hz).cos())
            } else {
                0.0
            }
        })
        .collect();
    Ok(apply_freq_mask(data, &mask))
}

/// 2-D median window; both sides must be odd. Default (1, 5): a pure
/// cross-channel window, the conventional erratic-trace suppressor.
#[derive(Debug, Clone, Copy)]
pub struct MedianConfig {
    pub window_time: usize,
    pub window_channels: usize,
}

impl Default for MedianConfig {
    fn default() -> Self {
        MedianConfig {
            window_time: 1,
            window_channels: 5,
        }
    }
}

impl MedianConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("time", self.window_time),
            ("channel", self.window_channels),
        ] {
            if w == 0 || w % 2 == 0 {
                return Err(Error::Config(format!(
                    "median: {name} window side must be odd and >= 1, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Mirror an out-of-range index back into [0, n): reflect about the edges
/// without repeating the edge sample.
fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    // period of the reflected sequence is 2n - 2 (n > 1)
    if n == 1 {
        return 0;
    }
    let period = 2 * n - 2;
    i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Each sample replaced by the median of its window neighborhood, with
/// reflect padding at the edges.
pub fn median_filter(data: &Grid2D, cfg: &MedianConfig) -> Result<Grid2D> {
    cfg.validate()?;
    let (rows, cols) = data.dim();
    let ht = (cfg.window_time / 2) as isize;
    let hc = (cfg.window_channels / 2) as isize;
    let mut out = Grid2D::zeros((rows, cols));
    let mut window = Vec::with_capacity(cfg.window_time * cfg.window_channels);
    for i in 0..rows {
        for j in 0..cols {
            window.clear();
            for di in -ht..=ht {
                let ri = reflect_index(i as isize + di, rows);
                for dj in -hc..=hc {
                    let rj = reflect_index(j as isize + dj, cols);
                    window.push(data[(ri, rj)]);
                }
            }
            let mid = window.len() / 2;
            let (_, median, _) =
                window.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).unwrap());
            out[(i, j)] = *median;
        }
    }
    Ok(out)
}

/// The DDUL-style ablation: a plain dense autoencoder (no pyramid
/// branches, no skip modules) trained unsupervised exactly like CP-UNet on
/// the record's own patches, then applied to it. Returns the denoised
/// record and the per-epoch loss history.
pub fn plain_autoencoder_denoise(
    data: &Grid2D,
    patch_cfg: crate::patch::PatchConfig,
    train_cfg: &crate::cpunet::TrainConfig,
) -> Result<(Grid2D, Vec<f64>)> {
    let mut cfg = crate::cpunet::CpuNetConfig::plain_autoencoder();
    cfg.input_dim = patch_cfg.side * patch_cfg.side;
    cfg.seed = train_cfg.seed;
    let mut net = crate::cpunet::build_cpunet(&cfg)?;
    let history = crate::cpunet::train_on_record(&mut net, data, patch_cfg, train_cfg)?;
    let denoised = crate::cpunet::denoise_record(&net, data, patch_cfg)?;
    Ok((denoised, history))
}

/// Helper shared by tests and benchmarks: a single synthesized tone trace.
pub fn tone_grid(rows: usize, cols: usize, freq_hz: f64, sample_rate_hz: f64) -> Grid2D {
    Grid2D::from_shape_fn((rows, cols), |(i, _)| {
        (2.0 * std::f64::consts::PI * freq_hz * i as f64 / sample_rate_hz).sin()
    })
}
