//! 2-D elastic (P-SV) forward modeling on layered velocity models,
//! producing clean DAS-style shot gathers.
//!
//! Scheme: velocity-stress staggered grid, 2nd-order time, 4th-order space
//! (order drops to 2nd within two cells of a boundary). Free surface on
//! top via stress imaging (σzz pinned to zero on the surface row, imaged
//! shear stress for the surface vx update, effective modulus for the
//! surface σxx update). Exponentially damped sponge zones absorb the
//! sides and bottom. The internal time step is auto-selected from the CFL
//! bound and the output is decimated to the requested sampling interval.
//!
//! Grid convention: row index j is depth (z, downward), column index i is
//! horizontal position (x). σxx/σzz live at integer (i, j), vx at
//! (i+1/2, j), vz at (i, j+1/2), σxz at (i+1/2, j+1/2).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::Grid2D;

// 4th-order staggered-grid derivative coefficients
const C1: f64 = 9.0 / 8.0;
const C2: f64 = 1.0 / 24.0;

/// Property bounds the forward-modeling configuration accepts.
pub const VP_RANGE: (f64, f64) = (1500.0, 4000.0);
pub const RHO_RANGE: (f64, f64) = (1900.0, 2300.0);
pub const F0_RANGE: (f64, f64) = (30.0, 75.0);

/// Ricker wavelet value at time `t` for dominant frequency `f0` and peak
/// delay `t0`: (1 − 2π²f0²τ²)·exp(−π²f0²τ²) with τ = t − t0.
pub fn ricker(f0_hz: f64, t_s: f64, t0_s: f64) -> f64 {
    let tau = t_s - t0_s;
    let a = (std::f64::consts::PI * f0_hz * tau).powi(2);
    (1.0 - 2.0 * a) * (-a).exp()
}

// --- Velocity models -----------------------------------------------------------

/// P velocity, S velocity, and density grids (rows = depth, cols = x).
#[derive(Debug, Clone)]
pub struct VelocityModel {
    pub vp: Grid2D,
    pub vs: Grid2D,
    pub rho: Grid2D,
    /// Spatial step in meters (square cells).
    pub dx: f64,
}

impl VelocityModel {
    pub fn nz(&self) -> usize {
        self.vp.nrows()
    }

    pub fn nx(&self) -> usize {
        self.vp.ncols()
    }

    /// Homogeneous half-space; vs defaults to vp/sqrt(3).
    pub fn homogeneous(nz: usize, nx: usize, dx: f64, vp: f64, rho: f64) -> Self {
        VelocityModel {
            vp: Grid2D::from_elem((nz, nx), vp),
            vs: Grid2D::from_elem((nz, nx), vp / 3f64.sqrt()),
            rho: Grid2D::from_elem((nz, nx), rho),
            dx,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vp.dim() != self.vs.dim() || self.vp.dim() != self.rho.dim() {
            return Err(Error::shape(
                "velocity model",
                format!("{:?}", self.vp.dim()),
                format!("vs {:?}, rho {:?}", self.vs.dim(), self.rho.dim()),
            ));
        }
        if !(self.dx > 0.0) {
            return Err(Error::Config("velocity model: dx must be positive".into()));
        }
        for ((&vp, &vs), &rho) in self.vp.iter().zip(self.vs.iter()).zip(self.rho.iter()) {
            if !(VP_RANGE.0..=VP_RANGE.1).contains(&vp) {
                return Err(Error::Config(format!(
                    "vp {vp} m/s outside supported range [{}, {}]",
                    VP_RANGE.0, VP_RANGE.1
                )));
            }
            if !(RHO_RANGE.0..=RHO_RANGE.1).contains(&rho) {
                return Err(Error::Config(format!(
                    "density {rho} kg/m3 outside supported range [{}, {}]",
                    RHO_RANGE.0, RHO_RANGE.1
                )));
            }
            if !(vs > 0.0 && vs < vp) {
                return Err(Error::Config(format!(
                    "vs {vs} must be positive and below vp {vp}"
                )));
            }
        }
        Ok(())
    }

    pub fn vp_max(&self) -> f64 {
        self.vp.iter().cloned().fold(0.0, f64::max)
    }
}

/// Interface geometry of a layer's top boundary, as depth-in-cells
/// functions of the column index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InterfaceGeometry {
    /// Horizontal at `depth`.
    Flat,
    /// depth + slope·x.
    Inclined { slope: f64 },
    /// Parabolic arc sagging to depth + sag at the center column.
    Concave { sag: f64 },
}

#[derive(Debug, Clone)]
pub struct LayerSpec {
    pub geometry: InterfaceGeometry,
    /// Top depth of the layer (cells) at the left edge (flat/inclined) or
    /// at the rim (concave).
    pub depth: f64,
    pub vp: f64,
    /// Defaults to vp/sqrt(3) when absent.
    pub vs: Option<f64>,
    pub rho: f64,
}

impl LayerSpec {
    fn interface_z(&self, x: f64, nx: usize) -> f64 {
        match self.geometry {
            InterfaceGeometry::Flat => self.depth,
            InterfaceGeometry::Inclined { slope } => self.depth + slope * x,
            InterfaceGeometry::Concave { sag } => {
                let xc = (nx.max(2) - 1) as f64 / 2.0;
                let u = (x - xc) / xc;
                self.depth + sag * (1.0 - u * u)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayeredModelSpec {
    pub nx: usize,
    pub nz: usize,
    pub dx: f64,
    pub layers: Vec<LayerSpec>,
}

impl LayeredModelSpec {
    /// The default benchmark model: flat, inclined, and concave layers on
    /// a 256-wide, 512-deep grid.
    pub fn demo() -> Self {
        LayeredModelSpec {
            nx: 256,
            nz: 512,
            dx: 1.0,
            layers: vec![
                LayerSpec {
                    geometry: InterfaceGeometry::Flat,
                    depth: 0.0,
                    vp: 1800.0,
                    vs: None,
                    rho: 1950.0,
                },
                LayerSpec {
                    geometry: InterfaceGeometry::Inclined { slope: 0.3 },
                    depth: 120.0,
                    vp: 2400.0,
                    vs: None,
                    rho: 2050.0,
                },
                LayerSpec {
                    geometry: InterfaceGeometry::Concave { sag: 60.0 },
                    depth: 280.0,
                    vp: 3000.0,
                    vs: None,
                    rho: 2150.0,
                },
                LayerSpec {
                    geometry: InterfaceGeometry::Flat,
                    depth: 420.0,
                    vp: 3600.0,
                    vs: None,
                    rho: 2250.0,
                },
            ],
        }
    }
}

/// Rasterizes a layer stack into property grids. Cells above the first
/// interface take the first layer's properties; each cell belongs to the
/// deepest layer whose interface lies at or above it.
pub fn build_layered_model(spec: &LayeredModelSpec) -> Result<VelocityModel> {
    if spec.layers.is_empty() {
        return Err(Error::Config("model needs at least one layer".into()));
    }
    if spec.nx == 0 || spec.nz == 0 {
        return Err(Error::Config("model dims must be positive".into()));
    }
    let (nz, nx) = (spec.nz, spec.nx);
    let mut vp = Grid2D::zeros((nz, nx));
    let mut vs = Grid2D::zeros((nz, nx));
    let mut rho = Grid2D::zeros((nz, nx));
    for i in 0..nx {
        let x = i as f64;
        let depths: Vec<f64> = spec
            .layers
            .iter()
            .map(|l| l.interface_z(x, nx))
            .collect();
        for k in 1..depths.len() {
            if depths[k] < depths[k - 1] {
                return Err(Error::Config(format!(
                    "layer {k} interface rises above layer {} at column {i}; layers must be ordered by depth",
                    k - 1
                )));
            }
        }
        for j in 0..nz {
            let mut layer = 0;
            for (k, &d) in depths.iter().enumerate() {
                if d <= j as f64 {
                    layer = k;
                }
            }
            let l = &spec.layers[layer];
            vp[(j, i)] = l.vp;
            vs[(j, i)] = l.vs.unwrap_or(l.vp / 3f64.sqrt());
            rho[(j, i)] = l.rho;
        }
    }
    let model = VelocityModel {
        vp,
        vs,
        rho,
        dx: spec.dx,
    };
    model.validate()?;
    Ok(model)
}

/// Parses the plain-text layered-model format: global `nx`/`nz`/`dx` keys
/// followed by one `[layer]` section per layer with `geometry`, `depth`,
/// `vp`, optional `vs`, `rho`, and geometry-specific `slope`/`sag` keys.
pub fn parse_model_spec(text: &str) -> Result<LayeredModelSpec> {
    let mut nx = None;
    let mut nz = None;
    let mut dx = None;
    let mut layers: Vec<std::collections::BTreeMap<String, String>> = Vec::new();
    let mut in_layer = false;

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line == "[layer]" {
            layers.push(Default::default());
            in_layer = true;
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("model spec line {}: expected key=value", lineno + 1))
        })?;
        let (key, value) = (key.trim(), value.trim());
        if in_layer {
            layers.last_mut().unwrap().insert(key.to_string(), value.to_string());
        } else {
            match key {
                "nx" => nx = Some(parse_num::<usize>(value, key, lineno)?),
                "nz" => nz = Some(parse_num::<usize>(value, key, lineno)?),
                "dx" => dx = Some(parse_num::<f64>(value, key, lineno)?),
                other => {
                    return Err(Error::Config(format!(
                        "model spec line {}: unknown global key '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
    }

    let nx = nx.ok_or_else(|| Error::Config("model spec: missing nx".into()))?;
    let nz = nz.ok_or_else(|| Error::Config("model spec: missing nz".into()))?;
    let dx = dx.unwrap_or(1.0);
    if layers.is_empty() {
        return Err(Error::Config("model spec: no [layer] sections".into()));
    }

    let mut parsed = Vec::with_capacity(layers.len());
    for (k, map) in layers.iter().enumerate() {
        let get = |key: &str| -> Result<&String> {
            map.get(key)
                .ok_or_else(|| Error::Config(format!("layer {k}: missing key '{key}'")))
        };
        let geometry_name = get("geometry")?;
        let geometry = match geometry_name.as_str() {
            "flat" => InterfaceGeometry::Flat,
            "inclined" => InterfaceGeometry::Inclined {
                slope: parse_num(get("slope")?, "slope", k)?,
            },
            "concave" => InterfaceGeometry::Concave {
                sag: parse_num(get("sag")?, "sag", k)?,
            },
            other => {
                return Err(Error::Config(format!(
                    "layer {k}: unknown geometry '{other}' (flat|inclined|concave)"
                )))
            }
        };
        let known = ["geometry", "depth", "vp", "vs", "rho", "slope", "sag"];
        for key in map.keys() {
            if !known.contains(&key.as_str()) {
                return Err(Error::Config(format!("layer {k}: unknown key '{key}'")));
            }
        }
        parsed.push(LayerSpec {
            geometry,
            depth: parse_num(get("depth")?, "depth", k)?,
            vp: parse_num(get("vp")?, "vp", k)?,
            vs: match map.get("vs") {
                Some(v) => Some(parse_num(v, "vs", k)?),
                None => None,
            },
            rho: parse_num(get("rho")?, "rho", k)?,
        });
    }
    Ok(LayeredModelSpec {
        nx,
        nz,
        dx,
        layers: parsed,
    })
}

fn parse_num<T: std::str::FromStr>(value: &str, key: &str, context: usize) -> Result<T> {
    value.parse::<T>().map_err(|_| {
        Error::Config(format!(
            "cannot parse '{value}' for key '{key}' (entry {context})"
        ))
    })
}

// --- Simulation configuration ----------------------------------------------------

/// Single seismic source with a Ricker time function, injected as a
/// vertical body force.
#[derive(Debug, Clone, Copy)]
pub struct SourceConfig {
    pub f0_hz: f64,
    /// (column, depth row) grid coordinates.
    pub position: (usize, usize),
    /// Wavelet peak delay in seconds; defaults to 1.2/f0.
    pub delay_s: f64,
    pub amplitude: f64,
}

impl SourceConfig {
    pub fn new(f0_hz: f64, position: (usize, usize)) -> Self {
        SourceConfig {
            f0_hz,
            position,
            delay_s: 1.2 / f0_hz,
            amplitude: 1.0,
        }
    }

    pub fn validate(&self, model: &VelocityModel) -> Result<()> {
        if !(F0_RANGE.0..=F0_RANGE.1).contains(&self.f0_hz) {
            return Err(Error::Config(format!(
                "source f0 {} Hz outside supported band [{}, {}]",
                self.f0_hz, F0_RANGE.0, F0_RANGE.1
            )));
        }
        if self.position.0 >= model.nx() || self.position.1 >= model.nz() {
            return Err(Error::Config(format!(
                "source position {:?} outside {}x{} grid",
                self.position,
                model.nx(),
                model.nz()
            )));
        }
        Ok(())
    }
}

/// What the surface receivers deliver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RecordingMode {
    /// Vertical particle velocity at each channel.
    ParticleVelocity,
    /// Centered difference of horizontal velocity across adjacent
    /// channels, the along-fiber DAS observable.
    #[default]
    StrainRate,
}

#[derive(Debug, Clone, Copy)]
pub struct SimConfig {
    /// Output sampling interval in seconds.
    pub dt_out: f64,
    /// Number of output samples.
    pub nt_out: usize,
    pub sponge_width: usize,
    /// Cerjan damping strength at the outermost sponge cell.
    pub sponge_alpha: f64,
    pub recording: RecordingMode,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt_out: 1e-3,
            nt_out: 800,
            sponge_width: 20,
            sponge_alpha: 0.3,
            recording: RecordingMode::StrainRate,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt_out > 0.0) {
            return Err(Error::Config("dt_out must be positive".into()));
        }
        if self.nt_out == 0 {
            return Err(Error::Config("nt_out must be positive".into()));
        }
        if self.sponge_alpha < 0.0 {
            return Err(Error::Config("sponge_alpha must be non-negative".into()));
        }
        Ok(())
    }
}

/// Largest stable internal step for the 4th-order staggered scheme, with a
/// safety margin. Always below 0.9·dx/(vp_max·sqrt(2)).
pub fn cfl_dt_max(dx: f64, vp_max: f64) -> f64 {
    0.72 * dx / (vp_max * std::f64::consts::SQRT_2 * (C1 + C2))
}

/// Time × channels recording with sampling metadata.
#[derive(Debug, Clone)]
pub struct ShotGather {
    pub data: Grid2D,
    pub dt_s: f64,
    /// Receiver spacing in meters (one channel per surface cell).
    pub channel_spacing_m: f64,
}

/// Raw surface wavefield history (both velocity components), before the
/// DAS recording operator is applied.
#[derive(Debug, Clone)]
pub struct SurfaceWavefield {
    pub vx: Grid2D,
    pub vz: Grid2D,
    pub dt_s: f64,
    pub channel_spacing_m: f64,
}

/// Applies the recording operator to the surface wavefield history.
pub fn record_das(field: &SurfaceWavefield, mode: RecordingMode) -> Result<ShotGather> {
    let data = match mode {
        RecordingMode::ParticleVelocity => field.vz.clone(),
        RecordingMode::StrainRate => {
            let (nt, nch) = field.vx.dim();
            if nch < 3 {
                return Err(Error::Usage(
                    "strain-rate recording needs at least 3 channels".into(),
                ));
            }
            let dx = field.channel_spacing_m;
            Grid2D::from_shape_fn((nt, nch), |(t, c)| {
                if c == 0 {
                    (field.vx[(t, 1)] - field.vx[(t, 0)]) / dx
                } else if c == nch - 1 {
                    (field.vx[(t, nch - 1)] - field.vx[(t, nch - 2)]) / dx
                } else {
                    (field.vx[(t, c + 1)] - field.vx[(t, c - 1)]) / (2.0 * dx)
                }
            })
        }
    };
    Ok(ShotGather {
        data,
        dt_s: field.dt_s,
        channel_spacing_m: field.channel_spacing_m,
    })
}

// --- The stepping engine ---------------------------------------------------------

/// Velocity-stress staggered-grid state plus precomputed coefficient
/// tables. Exposed so tests can drive single steps and monitor energy.
pub struct Simulator {
    nx: usize,
    nz: usize,
    dx: f64,
    dt: f64,
    n_sub: usize,
    step: usize,
    source: SourceConfig,
    // fields, row-major (j * nx + i)
    vx: Vec<f64>,
    vz: Vec<f64>,
    sxx: Vec<f64>,
    szz: Vec<f64>,
    sxz: Vec<f64>,
    // dt/(rho*dx) at the staggered velocity points
    bx: Vec<f64>,
    bz: Vec<f64>,
    // dt/dx · moduli at stress points
    lam_c: Vec<f64>,
    lam2mu_c: Vec<f64>,
    mu_xz_c: Vec<f64>,
    /// dt/dx · 4μ(λ+μ)/(λ+2μ), the free-surface σxx modulus
    surf_c: Vec<f64>,
    /// source injection scale dt/ρ at the source cell
    src_scale: f64,
    damp: Vec<f64>,
    // plain material copies for the energy functional
    rho: Vec<f64>,
    lam: Vec<f64>,
    mu: Vec<f64>,
}

impl Simulator {
    pub fn new(model: &VelocityModel, source: &SourceConfig, cfg: &SimConfig) -> Result<Self> {
        model.validate()?;
        source.validate(model)?;
        cfg.validate()?;
        let (nz, nx) = (model.nz(), model.nx());
        let dx = model.dx;
        let dt_max = cfl_dt_max(dx, model.vp_max());
        let n_sub = (cfg.dt_out / dt_max).ceil() as usize;
        if n_sub == 0 {
            return Err(Error::Config(format!(
                "cannot find a stable internal step for dt_out {}",
                cfg.dt_out
            )));
        }
        let dt = cfg.dt_out / n_sub as f64;
        debug_assert!(dt <= 0.9 * dx / (model.vp_max() * std::f64::consts::SQRT_2));

        let idx = |j: usize, i: usize| j * nx + i;
        let n = nz * nx;
        let mut lam = vec![0.0; n];
        let mut mu = vec![0.0; n];
        let mut rho = vec![0.0; n];
        for j in 0..nz {
            for i in 0..nx {
                let r = model.rho[(j, i)];
                let vs = model.vs[(j, i)];
                let vp = model.vp[(j, i)];
                rho[idx(j, i)] = r;
                mu[idx(j, i)] = r * vs * vs;
                lam[idx(j, i)] = r * (vp * vp - 2.0 * vs * vs);
            }
        }

        let mut bx = vec![0.0; n];
        let mut bz = vec![0.0; n];
        let mut lam_c = vec![0.0; n];
        let mut lam2mu_c = vec![0.0; n];
        let mut mu_xz_c = vec![0.0; n];
        let mut surf_c = vec![0.0; n];
        for j in 0..nz {
            for i in 0..nx {
                let k = idx(j, i);
                let rho_x = if i + 1 < nx {
                    0.5 * (rho[k] + rho[idx(j, i + 1)])
                } else {
                    rho[k]
                };
                let rho_z = if j + 1 < nz {
                    0.5 * (rho[k] + rho[idx(j + 1, i)])
                } else {
                    rho[k]
                };
                bx[k] = dt / (rho_x * dx);
                bz[k] = dt / (rho_z * dx);
                lam_c[k] = dt * lam[k] / dx;
                lam2mu_c[k] = dt * (lam[k] + 2.0 * mu[k]) / dx;
                surf_c[k] = dt * 4.0 * mu[k] * (lam[k] + mu[k]) / (lam[k] + 2.0 * mu[k]) / dx;
                // harmonic average of the four μ values around (i+1/2, j+1/2)
                let (i1, j1) = ((i + 1).min(nx - 1), (j + 1).min(nz - 1));
                let inv = 1.0 / mu[k] + 1.0 / mu[idx(j, i1)] + 1.0 / mu[idx(j1, i)]
                    + 1.0 / mu[idx(j1, i1)];
                mu_xz_c[k] = dt * (4.0 / inv) / dx;
            }
        }

        // Cerjan-style damping profile over the sponge cells on the left,
        // right, and bottom edges (the top stays a free surface)
        let w = cfg.sponge_width.min(nx / 2).min(nz);
        let mut damp = vec![1.0; n];
        if w > 0 {
            let profile = |d: usize| -> f64 {
                if d >= w {
                    1.0
                } else {
                    let u = cfg.sponge_alpha * (w - d) as f64 / w as f64;
                    (-u * u).exp()
                }
            };
            for j in 0..nz {
                for i in 0..nx {
                    let d_left = i;
                    let d_right = nx - 1 - i;
                    let d_bottom = nz - 1 - j;
                    let d = d_left.min(d_right).min(d_bottom);
                    damp[idx(j, i)] = profile(d);
                }
            }
        }

        let (si, sj) = (source.position.0, source.position.1);
        let src_scale = dt * source.amplitude / rho[idx(sj, si)];

        Ok(Simulator {
            nx,
            nz,
            dx,
            dt,
            n_sub,
            step: 0,
            source: *source,
            vx: vec![0.0; n],
            vz: vec![0.0; n],
            sxx: vec![0.0; n],
            szz: vec![0.0; n],
            sxz: vec![0.0; n],
            bx,
            bz,
            lam_c,
            lam2mu_c,
            mu_xz_c,
            surf_c,
            src_scale,
            damp,
            rho,
            lam,
            mu,
        })
    }

    pub fn dt_internal(&self) -> f64 {
        self.dt
    }

    pub fn substeps_per_sample(&self) -> usize {
        self.n_sub
    }

    /// Current simulated time.
    pub fn time(&self) -> f64 {
        self.step as f64 * self.dt
    }

    /// Advances the fields by one internal step.
    pub fn step(&mut self) {
        let nx = self.nx;
        let nz = self.nz;

        // -- velocity updates --
        let (vx, vz) = (&mut self.vx, &mut self.vz);
        let (sxx, szz, sxz) = (&self.sxx, &self.szz, &self.sxz);
        let (bx, bz) = (&self.bx, &self.bz);

        vx.par_chunks_mut(nx).enumerate().for_each(|(j, row)| {
            for i in 0..nx - 1 {
                let k = j * nx + i;
                // d(sxx)/dx at (i+1/2, j)
                let dsxx = if i >= 1 && i + 2 < nx {
                    C1 * (sxx[k + 1] - sxx[k]) - C2 * (sxx[k + 2] - sxx[k - 1])
                } else {
                    sxx[k + 1] - sxx[k]
                };
                // d(sxz)/dz at (i+1/2, j); sxz row j sits at j+1/2
                let dsxz = if j == 0 {
                    // imaged: sxz is antisymmetric about the free surface
                    2.0 * C1 * sxz[k] - 2.0 * C2 * sxz[nx + k]
                } else if j == 1 || j + 2 > nz - 1 {
                    sxz[k] - sxz[k - nx]
                } else {
                    C1 * (sxz[k] - sxz[k - nx]) - C2 * (sxz[k + nx] - sxz[k - 2 * nx])
                };
                row[i] += bx[k] * (dsxx + dsxz);
            }
        });

        vz.par_chunks_mut(nx).enumerate().for_each(|(j, row)| {
            if j + 1 >= nz {
                return;
            }
            for i in 0..nx {
                let k = j * nx + i;
                // d(sxz)/dx at (i, j+1/2); sxz col i sits at i+1/2
                let dsxz = if i >= 2 && i + 1 < nx {
                    C1 * (sxz[k] - sxz[k - 1]) - C2 * (sxz[k + 1] - sxz[k - 2])
                } else if i >= 1 {
                    sxz[k] - sxz[k - 1]
                } else {
                    sxz[k]
                };
                // d(szz)/dz at (i, j+1/2)
                let dszz = if j >= 1 && j + 2 < nz {
                    C1 * (szz[k + nx] - szz[k]) - C2 * (szz[k + 2 * nx] - szz[k - nx])
                } else {
                    szz[k + nx] - szz[k]
                };
                row[i] += bz[k] * (dsxz + dszz);
            }
        });

        // vertical body force with the Ricker time function
        let t = (self.step as f64 + 0.5) * self.dt;
        let (si, sj) = (self.source.position.0, self.source.position.1);
        self.vz[sj * nx + si] += self.src_scale * ricker(self.source.f0_hz, t, self.source.delay_s);

        // -- stress updates --
        let (vx, vz) = (&self.vx, &self.vz);
        let (sxx, szz) = (&mut self.sxx, &mut self.szz);
        let (lam_c, lam2mu_c, surf_c) = (&self.lam_c, &self.lam2mu_c, &self.surf_c);

        sxx.par_chunks_mut(nx)
            .zip(szz.par_chunks_mut(nx))
            .enumerate()
            .for_each(|(j, (sxx_row, szz_row))| {
                for i in 1..nx {
                    let k = j * nx + i;
                    // d(vx)/dx at (i, j); vx col i-1 sits at i-1/2
                    let dvx = if i >= 2 && i + 1 < nx {
                        C1 * (vx[k] - vx[k - 1]) - C2 * (vx[k + 1] - vx[k - 2])
                    } else {
                        vx[k] - vx[k - 1]
                    };
                    if j == 0 {
                        // free surface: szz = 0, σxx uses the unloaded modulus
                        sxx_row[i] += surf_c[k] * dvx;
                        szz_row[i] = 0.0;
                        continue;
                    }
                    // d(vz)/dz at (i, j); vz row j-1 sits at j-1/2
                    let dvz = if j >= 2 && j + 1 < nz {
                        C1 * (vz[k] - vz[k - nx]) - C2 * (vz[k + nx] - vz[k - 2 * nx])
                    } else {
                        vz[k] - vz[k - nx]
                    };
                    sxx_row[i] += lam2mu_c[k] * dvx + lam_c[k] * dvz;
                    szz_row[i] += lam_c[k] * dvx + lam2mu_c[k] * dvz;
                }
            });

        let (vx, vz) = (&self.vx, &self.vz);
        let sxz = &mut self.sxz;
        let mu_xz_c = &self.mu_xz_c;
        sxz.par_chunks_mut(nx).enumerate().for_each(|(j, row)| {
            if j + 1 >= nz {
                return;
            }
            for i in 0..nx - 1 {
                let k = j * nx + i;
                // d(vx)/dz at (i+1/2, j+1/2)
                let dvx = if j >= 1 && j + 2 < nz {
                    C1 * (vx[k + nx] - vx[k]) - C2 * (vx[k + 2 * nx] - vx[k - nx])
                } else {
                    vx[k + nx] - vx[k]
                };
                // d(vz)/dx at (i+1/2, j+1/2)
                let dvz = if i >= 1 && i + 2 < nx {
                    C1 * (vz[k + 1] - vz[k]) - C2 * (vz[k + 2] - vz[k - 1])
                } else {
                    vz[k + 1] - vz[k]
                };
                row[i] += mu_xz_c[k] * (dvx + dvz);
            }
        });

        // -- sponge damping --
        let damp = &self.damp;
        for field in [
            &mut self.vx,
            &mut self.vz,
            &mut self.sxx,
            &mut self.szz,
            &mut self.sxz,
        ] {
            field
                .par_chunks_mut(nx)
                .zip(damp.par_chunks(nx))
                .for_each(|(row, drow)| {
                    for (v, &d) in row.iter_mut().zip(drow.iter()) {
                        if d != 1.0 {
                            *v *= d;
                        }
                    }
                });
        }

        self.step += 1;
    }

    /// Kinetic plus elastic strain energy of the current field state.
    pub fn energy(&self) -> f64 {
        let mut e = 0.0;
        for k in 0..self.nx * self.nz {
            e += 0.5 * self.rho[k] * (self.vx[k] * self.vx[k] + self.vz[k] * self.vz[k]);
            let (lam, mu) = (self.lam[k], self.mu[k]);
            let denom = 4.0 * mu * (lam + mu);
            let (sxx, szz, sxz) = (self.sxx[k], self.szz[k], self.sxz[k]);
            let exx = ((lam + 2.0 * mu) * sxx - lam * szz) / denom;
            let ezz = ((lam + 2.0 * mu) * szz - lam * sxx) / denom;
            let exz = sxz / (2.0 * mu);
            e += 0.5 * (sxx * exx + szz * ezz + 2.0 * sxz * exz);
        }
        e
    }

    /// Surface rows of the two velocity components (vx at the surface, vz
    /// half a cell below it).
    pub fn surface_rows(&self) -> (&[f64], &[f64]) {
        (&self.vx[..self.nx], &self.vz[..self.nx])
    }

    /// Runs the full simulation, recording the surface wavefield decimated
    /// to the output sampling interval.
    pub fn run(&mut self, cfg: &SimConfig) -> Result<SurfaceWavefield> {
        let nt = cfg.nt_out;
        let mut vx_hist = Grid2D::zeros((nt, self.nx));
        let mut vz_hist = Grid2D::zeros((nt, self.nx));
        for sample in 0..nt {
            let (svx, svz) = self.surface_rows();
            for i in 0..self.nx {
                vx_hist[(sample, i)] = svx[i];
                vz_hist[(sample, i)] = svz[i];
            }
            if svx.iter().chain(svz.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Instability { step: self.step });
            }
            for _ in 0..self.n_sub {
                self.step();
            }
        }
        Ok(SurfaceWavefield {
            vx: vx_hist,
            vz: vz_hist,
            dt_s: cfg.dt_out,
            channel_spacing_m: self.dx,
        })
    }
}

/// Forward-models one shot and applies the recording operator.
pub fn simulate_shot(
    model: &VelocityModel,
    source: &SourceConfig,
    cfg: &SimConfig,
) -> Result<ShotGather> {
    let mut sim = Simulator::new(model, source, cfg)?;
    let field = sim.run(cfg)?;
    record_das(&field, cfg.recording)
}

/// First index where |trace| exceeds `frac` of its maximum.
pub fn first_break_index(trace: &[f64], frac: f64) -> Option<usize> {
    let max = trace.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max <= 0.0 {
        return None;
    }
    trace.iter().position(|v| v.abs() >= frac * max)
}
