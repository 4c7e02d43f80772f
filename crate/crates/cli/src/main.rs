//! Batch pipeline driver: synthesize clean gathers, corrupt them, train
//! the unsupervised denoiser, apply it, run classical baselines, and
//! score everything with S/N.

mod settings;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dasdn::baseline::{bandpass, median_filter, plain_autoencoder_denoise, BandpassConfig, MedianConfig};
use dasdn::cpunet::{
    build_cpunet, denoise_record, load_checkpoint, save_checkpoint, train_on_record,
};
use dasdn::io::{plot_heatmap, read_dgrid, write_dgrid, DgridDtype};
use dasdn::metrics::{snr_db, SnrConvention};
use dasdn::noise::{compose_noise, mix_to_snr, ComposeConfig, ErraticConfig, NoiseMix, RandomNoiseConfig};
use dasdn::wavesim::{
    build_layered_model, parse_model_spec, simulate_shot, LayeredModelSpec, SimConfig, SourceConfig,
};
use settings::Settings;

#[derive(Parser)]
#[command(
    name = "dasdn",
    version,
    about = "DAS seismic record denoising toolkit",
    propagate_version = true
)]
struct Cli {
    /// Plain-text key=value config file (flag values still win)
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Global RNG seed; overrides the config file and DASDN_SEED
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

impl From<DtypeArg> for DgridDtype {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::F32 => DgridDtype::F32,
            DtypeArg::F64 => DgridDtype::F64,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ArchArg {
    Cpunet,
    Plain,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Bandpass,
    Median,
    Autoencoder,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ConventionArg {
    Standard,
    PaperLiteral,
}

#[derive(Subcommand)]
enum Command {
    /// Forward-model a clean shot gather from a layered velocity model
    Synthesize {
        /// Layered model spec file; omit with --demo for the built-in model
        #[arg(long, value_name = "FILE", conflicts_with = "demo")]
        model_spec: Option<PathBuf>,
        /// Use the built-in demonstration model (256 wide, 512 deep)
        #[arg(long)]
        demo: bool,
        #[arg(long, value_name = "DGRID")]
        out: PathBuf,
        /// Ricker dominant frequency (Hz)
        #[arg(long)]
        f0: Option<f64>,
        /// Output samples
        #[arg(long)]
        nt: Option<usize>,
        /// Output sampling interval (s)
        #[arg(long)]
        dt_out: Option<f64>,
        /// Source column (defaults to the model center)
        #[arg(long)]
        source_x: Option<usize>,
        /// Source depth in cells
        #[arg(long)]
        source_depth: Option<usize>,
        /// strain-rate | particle-velocity
        #[arg(long)]
        record: Option<String>,
        #[arg(long, value_enum, default_value = "f32")]
        dtype: DtypeArg,
    },
    /// Corrupt a clean gather with the synthetic noise blend at a target S/N
    Noise {
        #[arg(long, value_name = "DGRID")]
        clean: PathBuf,
        #[arg(long, value_name = "DGRID")]
        out: PathBuf,
        /// Target S/N of the corrupted record in dB
        #[arg(long)]
        target_snr: Option<f64>,
        /// Energy fraction of synthetic noise (rest comes from the pool)
        #[arg(long)]
        synthetic_fraction: Option<f64>,
        /// Erratic energy share inside the synthetic component
        #[arg(long)]
        erratic_share: Option<f64>,
        /// Low-pass corner for shaping the random component (Hz)
        #[arg(long)]
        corner_hz: Option<f64>,
        /// Directory of DGRID records used as the external noise pool
        #[arg(long, value_name = "DIR")]
        external_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "f32")]
        dtype: DtypeArg,
    },
    /// Train a denoiser on a noisy record alone (no labels)
    Train {
        #[arg(long, value_name = "DGRID")]
        input: PathBuf,
        #[arg(long, value_name = "CPUN")]
        checkpoint: PathBuf,
        /// Per-epoch loss history CSV
        #[arg(long, value_name = "CSV")]
        history: Option<PathBuf>,
        #[arg(long, value_enum)]
        arch: Option<ArchArg>,
        /// synthetic | field stage-width preset
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        /// Huber threshold
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        dropout: Option<f64>,
        /// Patch side C
        #[arg(long)]
        side: Option<usize>,
        /// Patch overlap D (stride is C-D)
        #[arg(long)]
        overlap: Option<usize>,
    },
    /// Apply a trained checkpoint to a record
    Denoise {
        #[arg(long, value_name = "CPUN")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DGRID")]
        input: PathBuf,
        #[arg(long, value_name = "DGRID")]
        out: PathBuf,
        /// Patch overlap at inference (side comes from the checkpoint)
        #[arg(long)]
        overlap: Option<usize>,
        #[arg(long, value_enum, default_value = "f32")]
        dtype: DtypeArg,
    },
    /// Classical comparison methods
    Baseline {
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long, value_name = "DGRID")]
        input: PathBuf,
        #[arg(long, value_name = "DGRID")]
        out: PathBuf,
        #[arg(long)]
        f_lo: Option<f64>,
        #[arg(long)]
        f_hi: Option<f64>,
        #[arg(long)]
        taper: Option<f64>,
        #[arg(long)]
        sample_rate: Option<f64>,
        /// Median window length along time
        #[arg(long)]
        window_t: Option<usize>,
        /// Median window length across channels
        #[arg(long)]
        window_x: Option<usize>,
        /// Epochs for the autoencoder method
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        side: Option<usize>,
        #[arg(long)]
        overlap: Option<usize>,
        #[arg(long, value_enum, default_value = "f32")]
        dtype: DtypeArg,
    },
    /// S/N of an estimate against a clean reference
    Snr {
        #[arg(value_name = "CLEAN_DGRID")]
        clean: PathBuf,
        #[arg(value_name = "ESTIMATE_DGRID")]
        estimate: PathBuf,
        #[arg(long, value_enum, default_value = "standard")]
        convention: ConventionArg,
    },
    /// Render a grid as an 8-bit grayscale PGM heatmap
    Plot {
        #[arg(long, value_name = "DGRID")]
        input: PathBuf,
        #[arg(long, value_name = "PGM")]
        out: PathBuf,
    },
}

fn main() {
    if let Ok(threads) = std::env::var("DASDN_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut settings = Settings::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        settings.seed = seed;
    }
    match cli.command {
        Command::Synthesize {
            model_spec,
            demo,
            out,
            f0,
            nt,
            dt_out,
            source_x,
            source_depth,
            record,
            dtype,
        } => {
            let spec = match (model_spec, demo) {
                (Some(path), _) => {
                    let text = std::fs::read_to_string(&path)
                        .with_context(|| format!("cannot read model spec {}", path.display()))?;
                    parse_model_spec(&text)?
                }
                (None, true) => LayeredModelSpec::demo(),
                (None, false) => bail!("synthesize needs --model-spec FILE or --demo"),
            };
            if let Some(v) = f0 {
                settings.simulation.f0 = v;
            }
            if let Some(v) = nt {
                settings.simulation.nt = v;
            }
            if let Some(v) = dt_out {
                settings.simulation.dt_out = v;
            }
            if let Some(v) = source_x {
                settings.simulation.source_x = Some(v);
            }
            if let Some(v) = source_depth {
                settings.simulation.source_depth = v;
            }
            if let Some(v) = record {
                settings.simulation.record = v;
            }

            let model = build_layered_model(&spec)?;
            let sx = settings.simulation.source_x.unwrap_or(model.nx() / 2);
            let source = SourceConfig::new(
                settings.simulation.f0,
                (sx, settings.simulation.source_depth),
            );
            let cfg = SimConfig {
                dt_out: settings.simulation.dt_out,
                nt_out: settings.simulation.nt,
                recording: settings.recording_mode()?,
                ..SimConfig::default()
            };
            let gather = simulate_shot(&model, &source, &cfg)?;
            write_dgrid(&out, &gather.data, dtype.into())?;
            eprintln!(
                "synthesized {}x{} gather (dt {} s) -> {}",
                gather.data.nrows(),
                gather.data.ncols(),
                gather.dt_s,
                out.display()
            );
        }

        Command::Noise {
            clean,
            out,
            target_snr,
            synthetic_fraction,
            erratic_share,
            corner_hz,
            external_dir,
            dtype,
        } => {
            if let Some(v) = target_snr {
                settings.noise.target_snr = v;
            }
            if let Some(v) = synthetic_fraction {
                settings.noise.synthetic_fraction = v;
            }
            if let Some(v) = erratic_share {
                settings.noise.erratic_share = v;
            }
            if let Some(v) = corner_hz {
                settings.noise.corner_hz = Some(v);
            }
            if let Some(v) = external_dir {
                settings.noise.external_dir = Some(v.display().to_string());
            }

            let clean_grid = read_dgrid(&clean)?;
            let pool = match &settings.noise.external_dir {
                Some(dir) => Some(load_noise_pool(Path::new(dir))?),
                None => None,
            };
            let mix = NoiseMix {
                synthetic_fraction: settings.noise.synthetic_fraction,
                external_fraction: 1.0 - settings.noise.synthetic_fraction,
            };
            let compose_cfg = ComposeConfig {
                random: RandomNoiseConfig {
                    seed: settings.seed,
                    lowpass_corner_hz: settings.noise.corner_hz,
                    sample_rate_hz: settings.baselines.sample_rate,
                },
                erratic: ErraticConfig {
                    seed: settings.seed.wrapping_add(1),
                    ..ErraticConfig::default()
                },
                erratic_energy_share: settings.noise.erratic_share,
            };
            let clean_rms = dasdn::grid::rms(&clean_grid);
            let composed = compose_noise(
                clean_grid.dim(),
                &mix,
                &compose_cfg,
                clean_rms,
                pool.as_deref(),
            )?;
            if composed.external_is_surrogate && mix.external_fraction > 0.0 {
                eprintln!(
                    "notice: no external noise pool supplied; using the erratic surrogate for the {}% share",
                    (mix.external_fraction * 100.0).round()
                );
            }
            let (noisy, scale) = mix_to_snr(&clean_grid, &composed.grid, settings.noise.target_snr)?;
            write_dgrid(&out, &noisy, dtype.into())?;
            println!("target_snr_db={}", settings.noise.target_snr);
            println!("noise_scale={scale}");
        }

        Command::Train {
            input,
            checkpoint,
            history,
            arch,
            preset,
            epochs,
            batch,
            alpha,
            lr,
            dropout,
            side,
            overlap,
        } => {
            if let Some(v) = arch {
                settings.model.arch = match v {
                    ArchArg::Cpunet => "cpunet".into(),
                    ArchArg::Plain => "plain".into(),
                };
            }
            if let Some(v) = preset {
                settings.model.preset = v;
            }
            if let Some(v) = epochs {
                settings.training.epochs = v;
            }
            if let Some(v) = batch {
                settings.training.batch = v;
            }
            if let Some(v) = alpha {
                settings.training.alpha = v;
            }
            if let Some(v) = lr {
                settings.training.lr = v;
            }
            if let Some(v) = dropout {
                settings.model.dropout = v;
            }
            if let Some(v) = side {
                settings.patching.side = v;
            }
            if let Some(v) = overlap {
                settings.patching.overlap = v;
            }

            let record = read_dgrid(&input)?;
            let net_cfg = settings.net_config()?;
            let mut net = build_cpunet(&net_cfg)?;
            let hist = train_on_record(
                &mut net,
                &record,
                settings.patch_config(),
                &settings.train_config(),
            )?;
            save_checkpoint(&net, &checkpoint)?;
            if let Some(hist_path) = history {
                write_history(&hist_path, &hist)?;
            }
            match hist.last() {
                Some(last) => println!("final_epoch_loss={last}"),
                None => println!("final_epoch_loss=nan"),
            }
            eprintln!(
                "trained {} ({} params, {} epochs) -> {}",
                settings.model.arch,
                net.param_count(),
                hist.len(),
                checkpoint.display()
            );
        }

        Command::Denoise {
            checkpoint,
            input,
            out,
            overlap,
            dtype,
        } => {
            if let Some(v) = overlap {
                settings.patching.overlap = v;
            }
            let net = load_checkpoint(&checkpoint)?;
            let side = (net.cfg.input_dim as f64).sqrt().round() as usize;
            if side * side != net.cfg.input_dim {
                bail!(
                    "checkpoint input dim {} is not a square patch",
                    net.cfg.input_dim
                );
            }
            let record = read_dgrid(&input)?;
            let cfg = dasdn::patch::PatchConfig {
                side,
                overlap: settings.patching.overlap,
            };
            let denoised = denoise_record(&net, &record, cfg)?;
            write_dgrid(&out, &denoised, dtype.into())?;
            eprintln!("denoised {} -> {}", input.display(), out.display());
        }

        Command::Baseline {
            method,
            input,
            out,
            f_lo,
            f_hi,
            taper,
            sample_rate,
            window_t,
            window_x,
            epochs,
            side,
            overlap,
            dtype,
        } => {
            if let Some(v) = f_lo {
                settings.baselines.f_lo = v;
            }
            if let Some(v) = f_hi {
                settings.baselines.f_hi = v;
            }
            if let Some(v) = taper {
                settings.baselines.taper = v;
            }
            if let Some(v) = sample_rate {
                settings.baselines.sample_rate = v;
            }
            if let Some(v) = window_t {
                settings.baselines.window_t = v;
            }
            if let Some(v) = window_x {
                settings.baselines.window_x = v;
            }
            if let Some(v) = epochs {
                settings.training.epochs = v;
            }
            if let Some(v) = side {
                settings.patching.side = v;
            }
            if let Some(v) = overlap {
                settings.patching.overlap = v;
            }

            let record = read_dgrid(&input)?;
            let filtered = match method {
                MethodArg::Bandpass => {
                    let cfg = BandpassConfig {
                        f_lo_hz: settings.baselines.f_lo,
                        f_hi_hz: settings.baselines.f_hi,
                        taper_hz: settings.baselines.taper,
                        sample_rate_hz: settings.baselines.sample_rate,
                    };
                    bandpass(&record, &cfg)?
                }
                MethodArg::Median => {
                    let cfg = MedianConfig {
                        window_time: settings.baselines.window_t,
                        window_channels: settings.baselines.window_x,
                    };
                    median_filter(&record, &cfg)?
                }
                MethodArg::Autoencoder => {
                    let (denoised, _) = plain_autoencoder_denoise(
                        &record,
                        settings.patch_config(),
                        &settings.train_config(),
                    )?;
                    denoised
                }
            };
            write_dgrid(&out, &filtered, dtype.into())?;
            eprintln!("baseline {:?} -> {}", method_name(method), out.display());
        }

        Command::Snr {
            clean,
            estimate,
            convention,
        } => {
            let clean_grid = read_dgrid(&clean)?;
            let est_grid = read_dgrid(&estimate)?;
            let conv = match convention {
                ConventionArg::Standard => SnrConvention::Standard,
                ConventionArg::PaperLiteral => SnrConvention::PaperLiteral,
            };
            let value = snr_db(&clean_grid, &est_grid, conv)?;
            if value.is_infinite() {
                println!("S/N: inf dB (estimate equals reference)");
                println!("snr_db=inf");
            } else {
                println!("S/N: {value:.4} dB");
                println!("snr_db={value}");
            }
        }

        Command::Plot { input, out } => {
            let grid = read_dgrid(&input)?;
            plot_heatmap(&grid, &out)?;
            eprintln!(
                "plotted {}x{} grid -> {}",
                grid.nrows(),
                grid.ncols(),
                out.display()
            );
        }
    }
    Ok(())
}

fn method_name(m: MethodArg) -> &'static str {
    match m {
        MethodArg::Bandpass => "bandpass",
        MethodArg::Median => "median",
        MethodArg::Autoencoder => "autoencoder",
    }
}

/// Reads every *.dgrid in the directory, sorted by file name so pool
/// draws are reproducible.
fn load_noise_pool(dir: &Path) -> Result<Vec<dasdn::Grid2D>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot read noise pool directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "dgrid").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("noise pool directory {} holds no .dgrid files", dir.display());
    }
    paths.iter().map(|p| Ok(read_dgrid(p)?)).collect()
}

fn write_history(path: &Path, history: &[f64]) -> Result<()> {
    let mut text = String::from("epoch,loss\n");
    for (epoch, loss) in history.iter().enumerate() {
        text.push_str(&format!("{epoch},{loss}\n"));
    }
    dasdn::io::atomic_write(path, text.as_bytes())?;
    Ok(())
}
