//! The CP-UNet denoiser: context-pyramid encoder/decoder stages with
//! learned skip connections, the unsupervised training loop, full-record
//! denoising, and the CPUN checkpoint format.
//!
//! Architecture (synthetic preset): a flattened 48×48 patch (2304 values)
//! passes through four encoder stages of output dims 64, 32, 16, 8. Each
//! stage is a context pyramid module (CPM): three parallel
//! dense→LN→LeakyReLU→dropout branches of different widths whose outputs
//! are concatenated. Connection modules (CM, one dense→LN→LeakyReLU→dropout
//! block of equal in/out dim) tap the first three encoder stages; each
//! decoder stage after the first consumes the previous stage's output
//! concatenated with the matching CM output. A final linear head maps the
//! last decoder width back to the patch length.
//!
//! Training is label-free: the network reconstructs noisy patches from
//! noisy patches under a Huber loss; the narrow bottleneck and the robust
//! loss keep it from reproducing incoherent noise.

use std::io::Read;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{mean_std, Grid2D};
use crate::io::atomic_write;
use crate::nn::{
    dropout_forward, huber_grad, huber_loss, leaky_relu, leaky_relu_grad, AdamConfig, AdamState,
    DenseLayer, DropoutMode, HuberConfig, LayerNorm, LeakyReluConfig, LnCache,
};
use crate::patch::{extract_patches, reconstruct, PatchConfig, PatchSet};

// --- Building blocks ---------------------------------------------------------

/// One dense→LN→LeakyReLU→dropout block; the unit both CPM branches and
/// CMs are made of.
#[derive(Debug, Clone)]
pub struct Stage {
    pub dense: DenseLayer,
    pub norm: LayerNorm,
    pub lrelu: LeakyReluConfig,
    pub dropout_rate: f64,
}

#[derive(Debug)]
pub struct StageCache {
    input: Array1<f64>,
    ln: LnCache,
    act_in: Array1<f64>,
    mask: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct StageGrads {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl Stage {
    fn init(in_dim: usize, out_dim: usize, lambda: f64, dropout_rate: f64, rng: &mut impl Rng) -> Self {
        Stage {
            dense: DenseLayer::init(in_dim, out_dim, rng),
            norm: LayerNorm::identity(out_dim),
            lrelu: LeakyReluConfig { lambda },
            dropout_rate,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.dense.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.dense.out_dim()
    }

    pub fn forward(
        &self,
        x: ArrayView1<f64>,
        mode: DropoutMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Array1<f64>, StageCache)> {
        let f = self.dense.forward(x)?;
        let (n, ln) = self.norm.forward(f.view())?;
        let a = leaky_relu(n.view(), self.lrelu);
        let (y, mask) = dropout_forward(a.view(), self.dropout_rate, mode, rng);
        Ok((
            y,
            StageCache {
                input: x.to_owned(),
                ln,
                act_in: n,
                mask,
            },
        ))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward_into(
        &self,
        cache: &StageCache,
        grad_out: ArrayView1<f64>,
        g: &mut StageGrads,
    ) -> Array1<f64> {
        let da = &grad_out * &cache.mask;
        let dn = &da * &leaky_relu_grad(cache.act_in.view(), self.lrelu);
        let df = self
            .norm
            .backward_into(&cache.ln, dn.view(), &mut g.gamma, &mut g.beta);
        self.dense
            .backward_into(cache.input.view(), df.view(), &mut g.w, &mut g.b)
    }

    fn zero_grads(&self) -> StageGrads {
        StageGrads {
            w: Array2::zeros(self.dense.weights.dim()),
            b: Array1::zeros(self.dense.bias.len()),
            gamma: Array1::zeros(self.norm.gamma.len()),
            beta: Array1::zeros(self.norm.beta.len()),
        }
    }
}

/// Splits `out_dim` into positive branch widths proportional to the
/// fractions (largest-remainder rounding). When `out_dim` is smaller than
/// the number of branches, only the first `out_dim` branches are kept.
pub fn branch_dims(out_dim: usize, fractions: &[f64]) -> Result<Vec<usize>> {
    if fractions.is_empty() {
        return Err(Error::Config("CPM needs at least one branch fraction".into()));
    }
    if fractions.iter().any(|&f| !(f > 0.0)) {
        return Err(Error::Config("CPM branch fractions must be positive".into()));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "CPM branch fractions must sum to 1, got {sum}"
        )));
    }
    if out_dim == 0 {
        return Err(Error::Config("CPM out_dim must be positive".into()));
    }
    let kept = fractions.len().min(out_dim);
    let renorm: f64 = fractions[..kept].iter().sum();
    let exact: Vec<f64> = fractions[..kept]
        .iter()
        .map(|f| f / renorm * out_dim as f64)
        .collect();
    let mut dims: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
    let mut leftover = out_dim - dims.iter().sum::<usize>();
    // hand out remaining units by largest fractional remainder, ties to
    // earlier branches
    let mut order: Vec<usize> = (0..kept).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut oi = 0;
    while leftover > 0 {
        dims[order[oi % kept]] += 1;
        leftover -= 1;
        oi += 1;
    }
    // no branch may be empty
    while let Some(zero_at) = dims.iter().position(|&d| d == 0) {
        let donor = dims
            .iter()
            .enumerate()
            .max_by_key(|(_, &d)| d)
            .map(|(i, _)| i)
            .unwrap();
        if dims[donor] <= 1 {
            return Err(Error::Config(format!(
                "cannot split out_dim {out_dim} into {kept} positive branch widths"
            )));
        }
        dims[donor] -= 1;
        dims[zero_at] += 1;
    }
    debug_assert_eq!(dims.iter().sum::<usize>(), out_dim);
    Ok(dims)
}

/// Context pyramid module: parallel [`Stage`] branches of different widths
/// whose outputs are concatenated.
#[derive(Debug, Clone)]
pub struct Cpm {
    pub branches: Vec<Stage>,
}

#[derive(Debug)]
pub struct CpmCache {
    branches: Vec<StageCache>,
}

#[derive(Debug, Clone)]
pub struct CpmGrads {
    pub branches: Vec<StageGrads>,
}

impl Cpm {
    fn init(
        in_dim: usize,
        out_dim: usize,
        fractions: &[f64],
        lambda: f64,
        dropout_rate: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let dims = branch_dims(out_dim, fractions)?;
        let branches = dims
            .iter()
            .map(|&d| Stage::init(in_dim, d, lambda, dropout_rate, rng))
            .collect();
        Ok(Cpm { branches })
    }

    pub fn in_dim(&self) -> usize {
        self.branches[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.branches.iter().map(|b| b.out_dim()).sum()
    }

    pub fn forward(
        &self,
        x: ArrayView1<f64>,
        mode: DropoutMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Array1<f64>, CpmCache)> {
        let mut out = Array1::zeros(self.out_dim());
        let mut caches = Vec::with_capacity(self.branches.len());
        let mut offset = 0;
        for stage in &self.branches {
            let (y, cache) = stage.forward(x, mode, rng)?;
            out.slice_mut(ndarray::s![offset..offset + y.len()]).assign(&y);
            offset += y.len();
            caches.push(cache);
        }
        Ok((out, CpmCache { branches: caches }))
    }

    pub fn backward_into(
        &self,
        cache: &CpmCache,
        grad_out: ArrayView1<f64>,
        g: &mut CpmGrads,
    ) -> Array1<f64> {
        let mut dx = Array1::zeros(self.in_dim());
        let mut offset = 0;
        for ((stage, sc), sg) in self
            .branches
            .iter()
            .zip(&cache.branches)
            .zip(&mut g.branches)
        {
            let seg = grad_out.slice(ndarray::s![offset..offset + stage.out_dim()]);
            dx += &stage.backward_into(sc, seg, sg);
            offset += stage.out_dim();
        }
        dx
    }

    fn zero_grads(&self) -> CpmGrads {
        CpmGrads {
            branches: self.branches.iter().map(|b| b.zero_grads()).collect(),
        }
    }
}

// --- Configuration -----------------------------------------------------------

/// Architecture plus training defaults for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct CpuNetConfig {
    /// Flattened patch length (C·C).
    pub input_dim: usize,
    pub encoder_dims: Vec<usize>,
    pub decoder_dims: Vec<usize>,
    /// CPM branch width fractions; a single 1.0 entry gives plain stages.
    pub branch_fractions: Vec<f64>,
    pub lambda: f64,
    pub dropout_rate: f64,
    /// Connection-module skips from the first three encoder stages.
    pub use_cm_skips: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub huber_alpha: f64,
    pub seed: u64,
}

impl Default for CpuNetConfig {
    fn default() -> Self {
        CpuNetConfig::synthetic()
    }
}

impl CpuNetConfig {
    /// Preset used for the synthetic experiments: encoder 64, 32, 16, 8.
    pub fn synthetic() -> Self {
        CpuNetConfig {
            input_dim: 48 * 48,
            encoder_dims: vec![64, 32, 16, 8],
            decoder_dims: vec![8, 16, 32, 64],
            branch_fractions: vec![0.5, 0.25, 0.25],
            lambda: crate::nn::LEAKY_RELU_LAMBDA_DEFAULT,
            dropout_rate: crate::nn::DROPOUT_RATE_DEFAULT,
            use_cm_skips: true,
            epochs: 100,
            batch_size: 32,
            huber_alpha: 1.2,
            seed: 0,
        }
    }

    /// Preset used for field records: encoder 128, 64, 32, 16.
    pub fn field() -> Self {
        CpuNetConfig {
            encoder_dims: vec![128, 64, 32, 16],
            decoder_dims: vec![16, 32, 64, 128],
            ..CpuNetConfig::synthetic()
        }
    }

    /// Ablation preset: plain dense stages, no pyramid branches, no skips.
    pub fn plain_autoencoder() -> Self {
        CpuNetConfig {
            branch_fractions: vec![1.0],
            use_cm_skips: false,
            ..CpuNetConfig::synthetic()
        }
    }

    pub fn n_stages(&self) -> usize {
        self.encoder_dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.encoder_dims.len() != 4 || self.decoder_dims.len() != 4 {
            return Err(Error::Config(format!(
                "expected 4 encoder and 4 decoder stages, got {} and {}",
                self.encoder_dims.len(),
                self.decoder_dims.len()
            )));
        }
        for (i, (&d, &e)) in self
            .decoder_dims
            .iter()
            .zip(self.encoder_dims.iter().rev())
            .enumerate()
        {
            if d != e {
                return Err(Error::Config(format!(
                    "decoder stage {i} dim {d} does not mirror encoder dim {e}"
                )));
            }
        }
        for (i, &d) in self.encoder_dims.iter().enumerate() {
            branch_dims(d, &self.branch_fractions).map_err(|e| {
                Error::Config(format!("encoder stage {i} (dim {d}): {e}"))
            })?;
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1), got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !(self.huber_alpha > 0.0) {
            return Err(Error::Config(format!(
                "huber alpha must be positive, got {}",
                self.huber_alpha
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            huber: HuberConfig {
                alpha: self.huber_alpha,
            },
            adam: AdamConfig::default(),
            seed: self.seed,
        }
    }
}

// --- The network --------------------------------------------------------------

/// Record statistics applied before patching and inverted afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone)]
pub struct CpuNet {
    pub cfg: CpuNetConfig,
    pub encoder: Vec<Cpm>,
    pub skips: Vec<Stage>,
    pub decoder: Vec<Cpm>,
    pub head: DenseLayer,
    /// Standardization stats of the record the net was trained on.
    pub norm_stats: Option<NormStats>,
}

#[derive(Debug)]
pub struct NetCache {
    encoder: Vec<CpmCache>,
    skips: Vec<StageCache>,
    decoder: Vec<CpmCache>,
    head_in: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct NetGrads {
    pub encoder: Vec<CpmGrads>,
    pub skips: Vec<StageGrads>,
    pub decoder: Vec<CpmGrads>,
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

impl NetGrads {
    pub fn zero(&mut self) {
        for (_, block) in self.blocks_mut() {
            block.fill(0.0);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, block) in self.blocks_mut() {
            for v in block {
                *v *= factor;
            }
        }
    }

    fn stage_blocks<'a>(
        name: String,
        s: &'a StageGrads,
        out: &mut Vec<(String, &'a [f64])>,
    ) {
        out.push((format!("{name}.w"), s.w.as_slice().unwrap()));
        out.push((format!("{name}.b"), s.b.as_slice().unwrap()));
        out.push((format!("{name}.gamma"), s.gamma.as_slice().unwrap()));
        out.push((format!("{name}.beta"), s.beta.as_slice().unwrap()));
    }

    fn stage_blocks_mut<'a>(
        name: String,
        s: &'a mut StageGrads,
        out: &mut Vec<(String, &'a mut [f64])>,
    ) {
        out.push((format!("{name}.w"), s.w.as_slice_mut().unwrap()));
        out.push((format!("{name}.b"), s.b.as_slice_mut().unwrap()));
        out.push((format!("{name}.gamma"), s.gamma.as_slice_mut().unwrap()));
        out.push((format!("{name}.beta"), s.beta.as_slice_mut().unwrap()));
    }

    pub fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (i, cpm) in self.encoder.iter().enumerate() {
            for (b, s) in cpm.branches.iter().enumerate() {
                Self::stage_blocks(format!("encoder.{i}.branch.{b}"), s, &mut out);
            }
        }
        for (i, s) in self.skips.iter().enumerate() {
            Self::stage_blocks(format!("skip.{i}"), s, &mut out);
        }
        for (i, cpm) in self.decoder.iter().enumerate() {
            for (b, s) in cpm.branches.iter().enumerate() {
                Self::stage_blocks(format!("decoder.{i}.branch.{b}"), s, &mut out);
            }
        }
        out.push(("head.w".into(), self.head_w.as_slice().unwrap()));
        out.push(("head.b".into(), self.head_b.as_slice().unwrap()));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (i, cpm) in self.encoder.iter_mut().enumerate() {
            for (b, s) in cpm.branches.iter_mut().enumerate() {
                Self::stage_blocks_mut(format!("encoder.{i}.branch.{b}"), s, &mut out);
            }
        }
        for (i, s) in self.skips.iter_mut().enumerate() {
            Self::stage_blocks_mut(format!("skip.{i}"), s, &mut out);
        }
        for (i, cpm) in self.decoder.iter_mut().enumerate() {
            for (b, s) in cpm.branches.iter_mut().enumerate() {
                Self::stage_blocks_mut(format!("decoder.{i}.branch.{b}"), s, &mut out);
            }
        }
        out.push(("head.w".into(), self.head_w.as_slice_mut().unwrap()));
        out.push(("head.b".into(), self.head_b.as_slice_mut().unwrap()));
        out
    }
}

/// Builds the network; all inter-stage dimensions are checked and any
/// mismatch names the offending stage.
pub fn build_cpunet(cfg: &CpuNetConfig) -> Result<CpuNet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_stages();

    let mut encoder = Vec::with_capacity(n);
    let mut in_dim = cfg.input_dim;
    for &out_dim in &cfg.encoder_dims {
        encoder.push(Cpm::init(
            in_dim,
            out_dim,
            &cfg.branch_fractions,
            cfg.lambda,
            cfg.dropout_rate,
            &mut rng,
        )?);
        in_dim = out_dim;
    }

    let mut skips = Vec::new();
    if cfg.use_cm_skips {
        for &dim in &cfg.encoder_dims[..n - 1] {
            skips.push(Stage::init(dim, dim, cfg.lambda, cfg.dropout_rate, &mut rng));
        }
    }

    let mut decoder = Vec::with_capacity(n);
    for (i, &out_dim) in cfg.decoder_dims.iter().enumerate() {
        let in_dim = if i == 0 {
            *cfg.encoder_dims.last().unwrap()
        } else {
            let skip_dim = if cfg.use_cm_skips {
                cfg.encoder_dims[n - 1 - i]
            } else {
                0
            };
            cfg.decoder_dims[i - 1] + skip_dim
        };
        decoder.push(Cpm::init(
            in_dim,
            out_dim,
            &cfg.branch_fractions,
            cfg.lambda,
            cfg.dropout_rate,
            &mut rng,
        )?);
    }

    let head = DenseLayer::init(*cfg.decoder_dims.last().unwrap(), cfg.input_dim, &mut rng);

    let net = CpuNet {
        cfg: cfg.clone(),
        encoder,
        skips,
        decoder,
        head,
        norm_stats: None,
    };
    net.check_closure()?;
    Ok(net)
}

impl CpuNet {
    /// Verifies that every stage's declared input dim equals the dim of
    /// what is actually fed to it.
    pub fn check_closure(&self) -> Result<()> {
        let n = self.encoder.len();
        let mut feed = self.cfg.input_dim;
        for (i, cpm) in self.encoder.iter().enumerate() {
            if cpm.in_dim() != feed {
                return Err(Error::Config(format!(
                    "encoder stage {i} expects {} inputs but is fed {feed}",
                    cpm.in_dim()
                )));
            }
            feed = cpm.out_dim();
        }
        for (i, s) in self.skips.iter().enumerate() {
            let enc_out = self.encoder[i].out_dim();
            if s.in_dim() != enc_out || s.out_dim() != enc_out {
                return Err(Error::Config(format!(
                    "skip {i} must map {enc_out}->{enc_out}, got {}->{}",
                    s.in_dim(),
                    s.out_dim()
                )));
            }
        }
        for (i, cpm) in self.decoder.iter().enumerate() {
            let expected = if i == 0 {
                self.encoder[n - 1].out_dim()
            } else {
                let skip_dim = if self.cfg.use_cm_skips {
                    self.encoder[n - 1 - i].out_dim()
                } else {
                    0
                };
                self.decoder[i - 1].out_dim() + skip_dim
            };
            if cpm.in_dim() != expected {
                return Err(Error::Config(format!(
                    "decoder stage {i} expects {} inputs but is fed {expected}",
                    cpm.in_dim()
                )));
            }
        }
        if self.head.in_dim() != self.decoder[n - 1].out_dim()
            || self.head.out_dim() != self.cfg.input_dim
        {
            return Err(Error::Config(format!(
                "output head must map {}->{}, got {}->{}",
                self.decoder[n - 1].out_dim(),
                self.cfg.input_dim,
                self.head.in_dim(),
                self.head.out_dim()
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.param_blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn grads_like(&self) -> NetGrads {
        NetGrads {
            encoder: self.encoder.iter().map(|c| c.zero_grads()).collect(),
            skips: self.skips.iter().map(|s| s.zero_grads()).collect(),
            decoder: self.decoder.iter().map(|c| c.zero_grads()).collect(),
            head_w: Array2::zeros(self.head.weights.dim()),
            head_b: Array1::zeros(self.head.bias.len()),
        }
    }

    pub fn param_blocks(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (i, cpm) in self.encoder.iter().enumerate() {
            for (b, s) in cpm.branches.iter().enumerate() {
                let name = format!("encoder.{i}.branch.{b}");
                out.push((format!("{name}.w"), s.dense.weights.as_slice().unwrap()));
                out.push((format!("{name}.b"), s.dense.bias.as_slice().unwrap()));
                out.push((format!("{name}.gamma"), s.norm.gamma.as_slice().unwrap()));
                out.push((format!("{name}.beta"), s.norm.beta.as_slice().unwrap()));
            }
        }
        for (i, s) in self.skips.iter().enumerate() {
            let name = format!("skip.{i}");
            out.push((format!("{name}.w"), s.dense.weights.as_slice().unwrap()));
            out.push((format!("{name}.b"), s.dense.bias.as_slice().unwrap()));
            out.push((format!("{name}.gamma"), s.norm.gamma.as_slice().unwrap()));
            out.push((format!("{name}.beta"), s.norm.beta.as_slice().unwrap()));
        }
        for (i, cpm) in self.decoder.iter().enumerate() {
            for (b, s) in cpm.branches.iter().enumerate() {
                let name = format!("decoder.{i}.branch.{b}");
                out.push((format!("{name}.w"), s.dense.weights.as_slice().unwrap()));
                out.push((format!("{name}.b"), s.dense.bias.as_slice().unwrap()));
                out.push((format!("{name}.gamma"), s.norm.gamma.as_slice().unwrap()));
                out.push((format!("{name}.beta"), s.norm.beta.as_slice().unwrap()));
            }
        }
        out.push(("head.w".into(), self.head.weights.as_slice().unwrap()));
        out.push(("head.b".into(), self.head.bias.as_slice().unwrap()));
        out
    }

    pub fn param_blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (i, cpm) in self.encoder.iter_mut().enumerate() {
            for (b, s) in cpm.branches.iter_mut().enumerate() {
                let name = format!("encoder.{i}.branch.{b}");
                out.push((format!("{name}.w"), s.dense.weights.as_slice_mut().unwrap()));
                out.push((format!("{name}.b"), s.dense.bias.as_slice_mut().unwrap()));
                out.push((format!("{name}.gamma"), s.norm.gamma.as_slice_mut().unwrap()));
                out.push((format!("{name}.beta"), s.norm.beta.as_slice_mut().unwrap()));
            }
        }
        for (i, s) in self.skips.iter_mut().enumerate() {
            let name = format!("skip.{i}");
            out.push((format!("{name}.w"), s.dense.weights.as_slice_mut().unwrap()));
            out.push((format!("{name}.b"), s.dense.bias.as_slice_mut().unwrap()));
            out.push((format!("{name}.gamma"), s.norm.gamma.as_slice_mut().unwrap()));
            out.push((format!("{name}.beta"), s.norm.beta.as_slice_mut().unwrap()));
        }
        for (i, cpm) in self.decoder.iter_mut().enumerate() {
            for (b, s) in cpm.branches.iter_mut().enumerate() {
                let name = format!("decoder.{i}.branch.{b}");
                out.push((format!("{name}.w"), s.dense.weights.as_slice_mut().unwrap()));
                out.push((format!("{name}.b"), s.dense.bias.as_slice_mut().unwrap()));
                out.push((format!("{name}.gamma"), s.norm.gamma.as_slice_mut().unwrap()));
                out.push((format!("{name}.beta"), s.norm.beta.as_slice_mut().unwrap()));
            }
        }
        out.push(("head.w".into(), self.head.weights.as_slice_mut().unwrap()));
        out.push(("head.b".into(), self.head.bias.as_slice_mut().unwrap()));
        out
    }

    /// Parameters flattened in architecture order (checkpoint layout).
    pub fn params_flat(&self) -> Vec<f64> {
        self.param_blocks()
            .iter()
            .flat_map(|(_, b)| b.iter().copied())
            .collect()
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let mut blocks = self.param_blocks_mut();
        let total: usize = blocks.iter().map(|(_, b)| b.len()).sum();
        if flat.len() != total {
            return Err(Error::shape("set_params_flat", total, flat.len()));
        }
        let mut offset = 0;
        for (_, block) in &mut blocks {
            block.copy_from_slice(&flat[offset..offset + block.len()]);
            offset += block.len();
        }
        Ok(())
    }

    fn forward_inner(
        &self,
        x: ArrayView1<f64>,
        mode: DropoutMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Array1<f64>, NetCache)> {
        if x.len() != self.cfg.input_dim {
            return Err(Error::shape("cpunet forward", self.cfg.input_dim, x.len()));
        }
        let n = self.encoder.len();
        let mut enc_caches = Vec::with_capacity(n);
        let mut enc_outs: Vec<Array1<f64>> = Vec::with_capacity(n);
        let mut cur = x.to_owned();
        for cpm in &self.encoder {
            let (y, cache) = cpm.forward(cur.view(), mode, rng)?;
            enc_caches.push(cache);
            enc_outs.push(y.clone());
            cur = y;
        }

        let mut skip_caches = Vec::with_capacity(self.skips.len());
        let mut skip_outs = Vec::with_capacity(self.skips.len());
        for (i, stage) in self.skips.iter().enumerate() {
            let (y, cache) = stage.forward(enc_outs[i].view(), mode, rng)?;
            skip_caches.push(cache);
            skip_outs.push(y);
        }

        let mut dec_caches = Vec::with_capacity(n);
        let mut cur = enc_outs[n - 1].clone();
        for (i, cpm) in self.decoder.iter().enumerate() {
            let input = if i == 0 || !self.cfg.use_cm_skips {
                cur
            } else {
                let skip = &skip_outs[n - 1 - i];
                let mut joined = Array1::zeros(cur.len() + skip.len());
                joined.slice_mut(ndarray::s![..cur.len()]).assign(&cur);
                joined.slice_mut(ndarray::s![cur.len()..]).assign(skip);
                joined
            };
            let (y, cache) = cpm.forward(input.view(), mode, rng)?;
            dec_caches.push(cache);
            cur = y;
        }

        let head_in = cur;
        let out = self.head.forward(head_in.view())?;
        Ok((
            out,
            NetCache {
                encoder: enc_caches,
                skips: skip_caches,
                decoder: dec_caches,
                head_in,
            },
        ))
    }

    pub fn forward_train(
        &self,
        x: ArrayView1<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Array1<f64>, NetCache)> {
        self.forward_inner(x, DropoutMode::Train, rng)
    }

    /// Deterministic forward pass with dropout disabled.
    pub fn forward_eval(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0); // never drawn from in eval
        self.forward_inner(x, DropoutMode::Eval, &mut rng)
            .map(|(y, _)| y)
    }

    /// Backpropagates `grad_out` through the cached forward pass,
    /// accumulating parameter gradients into `grads`.
    pub fn backward_into(
        &self,
        cache: &NetCache,
        grad_out: ArrayView1<f64>,
        grads: &mut NetGrads,
    ) {
        let n = self.encoder.len();
        let mut d = self.head.backward_into(
            cache.head_in.view(),
            grad_out,
            &mut grads.head_w,
            &mut grads.head_b,
        );

        // gradients flowing into each encoder output via the skip path
        let mut skip_feedback: Vec<Option<Array1<f64>>> = vec![None; n];
        for i in (1..n).rev() {
            let dx = self.decoder[i].backward_into(
                &cache.decoder[i],
                d.view(),
                &mut grads.decoder[i],
            );
            if self.cfg.use_cm_skips {
                let prev_len = self.decoder[i - 1].out_dim();
                let skip_idx = n - 1 - i;
                let d_skip = dx.slice(ndarray::s![prev_len..]).to_owned();
                let d_enc = self.skips[skip_idx].backward_into(
                    &cache.skips[skip_idx],
                    d_skip.view(),
                    &mut grads.skips[skip_idx],
                );
                skip_feedback[skip_idx] = Some(d_enc);
                d = dx.slice(ndarray::s![..prev_len]).to_owned();
            } else {
                d = dx;
            }
        }
        d = self.decoder[0].backward_into(&cache.decoder[0], d.view(), &mut grads.decoder[0]);

        // walk the encoder backwards; stage i receives gradient from stage
        // i+1 (or the bottleneck consumer) plus its skip tap
        for i in (0..n).rev() {
            if let Some(fb) = &skip_feedback[i] {
                d += fb;
            }
            d = self.encoder[i].backward_into(&cache.encoder[i], d.view(), &mut grads.encoder[i]);
        }
    }

    pub fn apply_adam(&mut self, adam: &mut AdamState, grads: &NetGrads) -> Result<()> {
        let gblocks = grads.blocks();
        let pblocks = self.param_blocks_mut();
        debug_assert_eq!(pblocks.len(), gblocks.len());
        let mut joined: Vec<(&str, &mut [f64], &[f64])> = Vec::with_capacity(pblocks.len());
        for ((pname, p), (gname, g)) in pblocks.into_iter().zip(gblocks.iter()) {
            debug_assert_eq!(&pname, gname);
            joined.push((gname.as_str(), p, g));
        }
        adam.step_blocks(&mut joined)
    }
}

// --- Training -----------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub huber: HuberConfig,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            huber: HuberConfig::default(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// splitmix64-style mixing for per-sample dropout streams; keeps results
/// independent of batch-internal worker count.
fn mix_seed(seed: u64, epoch: u64, step: u64, slot: u64) -> u64 {
    let mut z = seed
        .wrapping_add(epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(step.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(slot.wrapping_mul(0x94d0_49bb_1331_11eb));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Unsupervised training: reconstruct noisy patches from themselves under
/// the Huber loss. Returns the per-epoch mean loss. No labels anywhere.
pub fn train_unsupervised(
    net: &mut CpuNet,
    patches: &PatchSet,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if patches.is_empty() {
        return Err(Error::Usage("training requires at least one patch".into()));
    }
    if patches.vector_len() != net.cfg.input_dim {
        return Err(Error::shape(
            "train_unsupervised",
            net.cfg.input_dim,
            patches.vector_len(),
        ));
    }
    cfg.huber.validate()?;
    cfg.adam.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }

    let mut adam = AdamState::new(net.param_count(), cfg.adam);
    let mut grads = net.grads_like();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5875_0f01);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..patches.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            grads.zero();
            let mut batch_loss = 0.0;
            // fixed accumulation order over batch slots keeps results
            // bit-reproducible
            for (slot, &idx) in chunk.iter().enumerate() {
                let target = patches.vectors.row(idx);
                let mut drop_rng = ChaCha8Rng::seed_from_u64(mix_seed(
                    cfg.seed,
                    epoch as u64,
                    step as u64,
                    slot as u64,
                ));
                let (out, cache) = net.forward_train(target, &mut drop_rng)?;
                let loss = huber_loss(out.view(), target, cfg.huber)?;
                if !loss.is_finite() {
                    return Err(Error::numeric(
                        format!("training epoch {epoch}, batch {step}"),
                        format!("non-finite loss {loss}"),
                    ));
                }
                let dl = huber_grad(out.view(), target, cfg.huber)?;
                net.backward_into(&cache, dl.view(), &mut grads);
                batch_loss += loss;
            }
            grads.scale(1.0 / chunk.len() as f64);
            net.apply_adam(&mut adam, &grads).map_err(|e| match e {
                Error::Numeric { context, message } => Error::Numeric {
                    context: format!("training epoch {epoch}, batch {step}: {context}"),
                    message,
                },
                other => other,
            })?;
            epoch_loss += batch_loss;
        }
        history.push(epoch_loss / patches.len() as f64);
    }
    Ok(history)
}

/// Standardizes the record, stores the stats on the net, extracts patches,
/// and trains. The convenience entry the CLI and benchmarks use.
pub fn train_on_record(
    net: &mut CpuNet,
    record: &Grid2D,
    patch_cfg: PatchConfig,
    train_cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let (mean, std) = mean_std(record);
    if std == 0.0 {
        return Err(Error::Usage(
            "cannot train on a constant record (zero variance)".into(),
        ));
    }
    net.norm_stats = Some(NormStats { mean, std });
    let standardized = record.mapv(|v| (v - mean) / std);
    let patches = extract_patches(&standardized, patch_cfg)?;
    train_unsupervised(net, &patches, train_cfg)
}

/// Full-record denoising: patch, standardize with the stored stats, run
/// every patch through the net (eval mode), un-standardize, reconstruct
/// with overlap averaging.
pub fn denoise_record(net: &CpuNet, record: &Grid2D, patch_cfg: PatchConfig) -> Result<Grid2D> {
    let stats = net.norm_stats.ok_or_else(|| {
        Error::Usage("model has no stored standardization stats; train it first".into())
    })?;
    let standardized = record.mapv(|v| (v - stats.mean) / stats.std);
    let mut set = extract_patches(&standardized, patch_cfg)?;
    let outputs: Vec<Result<Array1<f64>>> = set
        .vectors
        .rows()
        .into_iter()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|row| net.forward_eval(row))
        .collect();
    for (k, out) in outputs.into_iter().enumerate() {
        set.vectors.row_mut(k).assign(&out?);
    }
    let rebuilt = reconstruct(&set)?;
    Ok(rebuilt.mapv(|v| v * stats.std + stats.mean))
}

// --- Checkpoint format ---------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"CPUN";
const CHECKPOINT_VERSION: u8 = 1;

/// Serializes the config block and parameter blocks in architecture order,
/// 8-byte little-endian floats throughout.
pub fn save_checkpoint(net: &CpuNet, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.push(CHECKPOINT_VERSION);
    let cfg = &net.cfg;
    buf.extend_from_slice(&(cfg.input_dim as u32).to_le_bytes());
    buf.push(cfg.n_stages() as u8);
    for &d in &cfg.encoder_dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &d in &cfg.decoder_dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.push(cfg.branch_fractions.len() as u8);
    for &f in &cfg.branch_fractions {
        buf.extend_from_slice(&f.to_le_bytes());
    }
    buf.extend_from_slice(&cfg.lambda.to_le_bytes());
    buf.extend_from_slice(&cfg.dropout_rate.to_le_bytes());
    buf.push(cfg.use_cm_skips as u8);
    match net.norm_stats {
        Some(s) => {
            buf.push(1);
            buf.extend_from_slice(&s.mean.to_le_bytes());
            buf.extend_from_slice(&s.std.to_le_bytes());
        }
        None => {
            buf.push(0);
            buf.extend_from_slice(&0f64.to_le_bytes());
            buf.extend_from_slice(&0f64.to_le_bytes());
        }
    }
    let params = net.params_flat();
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    atomic_write(path, &buf)
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(path.display().to_string(), format!("truncated {what}")))
}

fn read_u32(r: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, path, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read, path: &Path, what: &str) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact_or(r, &mut b, path, what)?;
    Ok(f64::from_le_bytes(b))
}

fn read_u8(r: &mut impl Read, path: &Path, what: &str) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact_or(r, &mut b, path, what)?;
    Ok(b[0])
}

/// Loads a checkpoint for resumed training or inference.
pub fn load_checkpoint(path: &Path) -> Result<CpuNet> {
    let file = std::fs::File::open(path)?;
    let mut r = std::io::BufReader::new(file);
    let p = path;

    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, p, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(
            p.display().to_string(),
            format!("bad magic {magic:?}, expected \"CPUN\""),
        ));
    }
    let version = read_u8(&mut r, p, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            p.display().to_string(),
            format!("unsupported version {version}"),
        ));
    }
    let input_dim = read_u32(&mut r, p, "input_dim")? as usize;
    let n_stages = read_u8(&mut r, p, "stage count")? as usize;
    let mut encoder_dims = Vec::with_capacity(n_stages);
    for _ in 0..n_stages {
        encoder_dims.push(read_u32(&mut r, p, "encoder dims")? as usize);
    }
    let mut decoder_dims = Vec::with_capacity(n_stages);
    for _ in 0..n_stages {
        decoder_dims.push(read_u32(&mut r, p, "decoder dims")? as usize);
    }
    let n_branches = read_u8(&mut r, p, "branch count")? as usize;
    let mut branch_fractions = Vec::with_capacity(n_branches);
    for _ in 0..n_branches {
        branch_fractions.push(read_f64(&mut r, p, "branch fractions")?);
    }
    let lambda = read_f64(&mut r, p, "lambda")?;
    let dropout_rate = read_f64(&mut r, p, "dropout rate")?;
    let use_cm_skips = read_u8(&mut r, p, "skip flag")? != 0;
    let has_stats = read_u8(&mut r, p, "stats flag")? != 0;
    let mean = read_f64(&mut r, p, "stats mean")?;
    let std = read_f64(&mut r, p, "stats std")?;

    let cfg = CpuNetConfig {
        input_dim,
        encoder_dims,
        decoder_dims,
        branch_fractions,
        lambda,
        dropout_rate,
        use_cm_skips,
        ..CpuNetConfig::synthetic()
    };
    let mut net = build_cpunet(&cfg).map_err(|e| {
        Error::format(p.display().to_string(), format!("config block invalid: {e}"))
    })?;

    let mut count_b = [0u8; 8];
    read_exact_or(&mut r, &mut count_b, p, "param count")?;
    let count = u64::from_le_bytes(count_b) as usize;
    if count != net.param_count() {
        return Err(Error::format(
            p.display().to_string(),
            format!(
                "param count {count} does not match architecture ({} expected)",
                net.param_count()
            ),
        ));
    }
    let mut flat = vec![0.0f64; count];
    for v in &mut flat {
        *v = read_f64(&mut r, p, "parameters")?;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::format(
            p.display().to_string(),
            "trailing bytes after parameter blocks",
        ));
    }
    net.set_params_flat(&flat)?;
    net.norm_stats = if has_stats { Some(NormStats { mean, std }) } else { None };
    Ok(net)
}
