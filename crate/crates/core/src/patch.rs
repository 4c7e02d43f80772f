//! Deterministic tiling of a 2-D record into flattened C×C patches with
//! stride C−D, and exact reconstruction with overlap averaging.
//!
//! Window origins sit at multiples of the stride along each axis; when the
//! last stride does not land flush with the boundary, one extra window is
//! placed flush against it (shift-last-window), so every sample is covered
//! at least once and no samples are fabricated by padding.

use ndarray::{s, Array1, Array2};

use crate::error::{Error, Result};
use crate::grid::Grid2D;

#[derive(Debug, Clone, Copy)]
pub struct PatchConfig {
    /// Patch side length C.
    pub side: usize,
    /// Overlap D; the stride is C − D.
    pub overlap: usize,
}

pub const PATCH_SIDE_DEFAULT: usize = 48;

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            side: PATCH_SIDE_DEFAULT,
            overlap: 0,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.side == 0 {
            return Err(Error::Config("patch side must be positive".into()));
        }
        if self.overlap >= self.side {
            return Err(Error::Config(format!(
                "patch overlap must satisfy 0 <= D < C, got D = {} with C = {}",
                self.overlap, self.side
            )));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.side - self.overlap
    }
}

/// Flattened C·C patch vectors plus the index map that allows exact
/// reconstruction.
#[derive(Debug, Clone)]
pub struct PatchSet {
    /// One row per patch, each of length side².
    pub vectors: Array2<f64>,
    /// (row, col) offset of each patch window in the source grid.
    pub origins: Vec<(usize, usize)>,
    pub side: usize,
    pub source_rows: usize,
    pub source_cols: usize,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn vector_len(&self) -> usize {
        self.side * self.side
    }
}

/// Window origins along one axis: multiples of the stride, plus one window
/// shifted flush against the boundary when the tiling does not divide.
fn axis_origins(len: usize, side: usize, stride: usize) -> Vec<usize> {
    let mut origins = Vec::new();
    let mut pos = 0;
    while pos + side <= len {
        origins.push(pos);
        pos += stride;
    }
    let last = *origins.last().expect("len >= side guarantees one origin");
    if last + side < len {
        origins.push(len - side);
    }
    origins
}

/// Tiles `data` into flattened row-major patches.
pub fn extract_patches(data: &Grid2D, cfg: PatchConfig) -> Result<PatchSet> {
    cfg.validate()?;
    let (rows, cols) = data.dim();
    if rows < cfg.side || cols < cfg.side {
        return Err(Error::Usage(format!(
            "record {rows}x{cols} is smaller than one {}x{} patch",
            cfg.side, cfg.side
        )));
    }
    let row_origins = axis_origins(rows, cfg.side, cfg.stride());
    let col_origins = axis_origins(cols, cfg.side, cfg.stride());
    let mut origins = Vec::with_capacity(row_origins.len() * col_origins.len());
    let mut vectors = Array2::zeros((row_origins.len() * col_origins.len(), cfg.side * cfg.side));
    let mut k = 0;
    for &r in &row_origins {
        for &c in &col_origins {
            let window = data.slice(s![r..r + cfg.side, c..c + cfg.side]);
            let flat: Vec<f64> = window.iter().copied().collect();
            vectors.row_mut(k).assign(&Array1::from_vec(flat));
            origins.push((r, c));
            k += 1;
        }
    }
    Ok(PatchSet {
        vectors,
        origins,
        side: cfg.side,
        source_rows: rows,
        source_cols: cols,
    })
}

/// Rebuilds the source grid; each output sample is the arithmetic mean of
/// all patch values covering it.
pub fn reconstruct(patches: &PatchSet) -> Result<Grid2D> {
    if patches.is_empty() {
        return Err(Error::Usage("cannot reconstruct from an empty patch set".into()));
    }
    let side = patches.side;
    if patches.vectors.ncols() != side * side || patches.vectors.nrows() != patches.origins.len() {
        return Err(Error::shape(
            "reconstruct",
            format!("{} vectors of length {}", patches.origins.len(), side * side),
            format!(
                "{} vectors of length {}",
                patches.vectors.nrows(),
                patches.vectors.ncols()
            ),
        ));
    }
    let (rows, cols) = (patches.source_rows, patches.source_cols);
    for &(r, c) in &patches.origins {
        if r + side > rows || c + side > cols {
            return Err(Error::Usage(format!(
                "patch origin ({r}, {c}) does not fit a {side}x{side} window inside {rows}x{cols}"
            )));
        }
    }
    let mut sums = Array2::<f64>::zeros((rows, cols));
    let mut counts = Array2::<f64>::zeros((rows, cols));
    for (vec, &(r, c)) in patches.vectors.rows().into_iter().zip(&patches.origins) {
        for i in 0..side {
            for j in 0..side {
                sums[(r + i, c + j)] += vec[i * side + j];
                counts[(r + i, c + j)] += 1.0;
            }
        }
    }
    if counts.iter().any(|&c| c == 0.0) {
        return Err(Error::Usage(
            "patch windows do not cover every sample of the source grid".into(),
        ));
    }
    Ok(sums / counts)
}

/// Coverage count per sample; useful for diagnostics and tests.
pub fn coverage(patches: &PatchSet) -> Array2<u32> {
    let mut counts = Array2::<u32>::zeros((patches.source_rows, patches.source_cols));
    for &(r, c) in &patches.origins {
        for i in 0..patches.side {
            for j in 0..patches.side {
                counts[(r + i, c + j)] += 1;
            }
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn grid_from_fn(rows: usize, cols: usize) -> Grid2D {
        Grid2D::from_shape_fn((rows, cols), |(i, j)| (i * 1000 + j) as f64)
    }

    #[test]
    fn exact_tiling_96x96() {
        let cfg = PatchConfig { side: 48, overlap: 0 };
        let set = extract_patches(&grid_from_fn(96, 96), cfg).unwrap();
        assert_eq!(set.origins, vec![(0, 0), (0, 48), (48, 0), (48, 48)]);
    }

    #[test]
    fn shift_last_window_100x48() {
        let cfg = PatchConfig { side: 48, overlap: 0 };
        let set = extract_patches(&grid_from_fn(100, 48), cfg).unwrap();
        let row_origins: Vec<usize> = set.origins.iter().map(|&(r, _)| r).collect();
        assert_eq!(row_origins, vec![0, 48, 52]);
        assert_eq!(set.len(), 3);
    }

    #[test]
    fn single_patch_is_flattened_input() {
        let data = grid_from_fn(48, 48);
        let cfg = PatchConfig::default();
        let set = extract_patches(&data, cfg).unwrap();
        assert_eq!(set.len(), 1);
        let flat: Vec<f64> = data.iter().copied().collect();
        assert_eq!(set.vectors.row(0).to_vec(), flat);
        // single-patch reconstruct inverts the flattening
        assert_eq!(reconstruct(&set).unwrap(), data);
    }

    #[test]
    fn record_smaller_than_patch_rejected() {
        let cfg = PatchConfig::default();
        assert!(matches!(
            extract_patches(&grid_from_fn(47, 48), cfg),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn overlap_mean_of_two_values() {
        // Two windows fully covering the same 1x1 region with values a and b.
        let set = PatchSet {
            vectors: array![[2.0], [4.0]],
            origins: vec![(0, 0), (0, 0)],
            side: 1,
            source_rows: 1,
            source_cols: 1,
        };
        let rec = reconstruct(&set).unwrap();
        assert_eq!(rec[(0, 0)], 3.0);
    }

    #[test]
    fn round_trip_with_overlap() {
        let data = grid_from_fn(70, 55);
        for overlap in [0, 4, 24] {
            let cfg = PatchConfig { side: 32, overlap };
            let set = extract_patches(&data, cfg).unwrap();
            let rec = reconstruct(&set).unwrap();
            let max_err = (&rec - &data).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max_err < 1e-12, "overlap {overlap}: max err {max_err}");
        }
    }

    #[test]
    fn coverage_at_least_one() {
        let cfg = PatchConfig { side: 48, overlap: 24 };
        let set = extract_patches(&grid_from_fn(130, 97), cfg).unwrap();
        assert!(coverage(&set).iter().all(|&c| c >= 1));
    }

    #[test]
    fn inconsistent_origin_rejected() {
        let mut set = extract_patches(&grid_from_fn(48, 48), PatchConfig::default()).unwrap();
        set.origins[0] = (5, 5); // window no longer fits
        assert!(matches!(reconstruct(&set), Err(Error::Usage(_))));
    }
}
