//! Persistent data formats: the DGRID binary grid file and PGM heatmap
//! rendering. All writes go through a temp-file-then-rename so partially
//! written files are never observed.

use std::fs;
use std::io::{BufReader, Read};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::grid::{ensure_finite, Grid2D};

const DGRID_MAGIC: &[u8; 4] = b"DASG";
const DGRID_VERSION: u8 = 1;

/// Sample encoding of a DGRID payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DgridDtype {
    /// 32-bit little-endian float (code 0).
    #[default]
    F32,
    /// 64-bit little-endian float (code 1).
    F64,
}

impl DgridDtype {
    fn code(self) -> u8 {
        match self {
            DgridDtype::F32 => 0,
            DgridDtype::F64 => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DgridDtype::F32),
            1 => Some(DgridDtype::F64),
            _ => None,
        }
    }

    fn sample_size(self) -> usize {
        match self {
            DgridDtype::F32 => 4,
            DgridDtype::F64 => 8,
        }
    }
}

/// Writes `content` to `path` atomically (temp file in the same directory,
/// then rename).
pub fn atomic_write(path: &Path, content: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = match dir {
        Some(d) => tempfile::NamedTempFile::new_in(d)?,
        None => tempfile::NamedTempFile::new_in(".")?,
    };
    use std::io::Write;
    tmp.write_all(content)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Writes a grid as a DGRID file: magic "DASG", version, rows/cols as
/// little-endian u32, a dtype code byte, then row-major samples.
pub fn write_dgrid(path: &Path, grid: &Grid2D, dtype: DgridDtype) -> Result<()> {
    let (rows, cols) = grid.dim();
    let mut buf =
        Vec::with_capacity(14 + rows * cols * dtype.sample_size());
    buf.extend_from_slice(DGRID_MAGIC);
    buf.push(DGRID_VERSION);
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    buf.push(dtype.code());
    match dtype {
        DgridDtype::F32 => {
            for &v in grid.iter() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        DgridDtype::F64 => {
            for &v in grid.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    atomic_write(path, &buf)
}

/// Reads a DGRID file, validating magic, version, dtype code, and payload
/// length.
pub fn read_dgrid(path: &Path) -> Result<Grid2D> {
    let file = fs::File::open(path)
        .map_err(|e| Error::format(path.display().to_string(), format!("cannot open: {e}")))?;
    let mut r = BufReader::new(file);
    let pstr = path.display().to_string();

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format(&pstr, "truncated magic"))?;
    if &magic != DGRID_MAGIC {
        return Err(Error::format(
            &pstr,
            format!("bad magic {magic:?}, expected \"DASG\""),
        ));
    }
    let mut byte = [0u8; 1];
    r.read_exact(&mut byte)
        .map_err(|_| Error::format(&pstr, "truncated version"))?;
    if byte[0] != DGRID_VERSION {
        return Err(Error::format(&pstr, format!("unsupported version {}", byte[0])));
    }
    let mut quad = [0u8; 4];
    r.read_exact(&mut quad)
        .map_err(|_| Error::format(&pstr, "truncated row count"))?;
    let rows = u32::from_le_bytes(quad) as usize;
    r.read_exact(&mut quad)
        .map_err(|_| Error::format(&pstr, "truncated column count"))?;
    let cols = u32::from_le_bytes(quad) as usize;
    r.read_exact(&mut byte)
        .map_err(|_| Error::format(&pstr, "truncated dtype code"))?;
    let dtype = DgridDtype::from_code(byte[0])
        .ok_or_else(|| Error::format(&pstr, format!("unknown dtype code {}", byte[0])))?;

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let expected = rows * cols * dtype.sample_size();
    if payload.len() != expected {
        return Err(Error::format(
            &pstr,
            format!(
                "payload length mismatch: expected {expected} bytes for {rows}x{cols} {dtype:?}, got {}",
                payload.len()
            ),
        ));
    }
    let mut data = Vec::with_capacity(rows * cols);
    match dtype {
        DgridDtype::F32 => {
            for chunk in payload.chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
        }
        DgridDtype::F64 => {
            for chunk in payload.chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
        }
    }
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::format(&pstr, format!("shape error: {e}")))
}

/// Renders a grid as an 8-bit binary PGM (P5), clipping amplitudes to the
/// [2nd, 98th] percentile window and mapping linearly to 0..255. A constant
/// grid renders as uniform mid-gray.
pub fn plot_heatmap(grid: &Grid2D, path: &Path) -> Result<()> {
    ensure_finite(grid, "plot_heatmap")?;
    let (lo, hi) = percentile_window(grid, 2.0, 98.0);
    let (rows, cols) = grid.dim();
    let mut buf = Vec::with_capacity(32 + rows * cols);
    buf.extend_from_slice(format!("P5\n{cols} {rows}\n255\n").as_bytes());
    let span = hi - lo;
    for &v in grid.iter() {
        let pixel = if span == 0.0 {
            128
        } else {
            let t = ((v - lo) / span).clamp(0.0, 1.0);
            (t * 255.0).round() as u8
        };
        buf.push(pixel);
    }
    atomic_write(path, &buf)
}

/// The [lo_pct, hi_pct] percentile values of the grid samples.
pub fn percentile_window(grid: &Grid2D, lo_pct: f64, hi_pct: f64) -> (f64, f64) {
    let mut sorted: Vec<f64> = grid.iter().copied().collect();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let pick = |pct: f64| {
        let idx = ((pct / 100.0) * (sorted.len() - 1) as f64).round() as usize;
        sorted[idx.min(sorted.len() - 1)]
    };
    (pick(lo_pct), pick(hi_pct))
}
