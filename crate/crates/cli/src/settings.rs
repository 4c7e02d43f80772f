//! Run configuration: built-in defaults, overridden by a plain-text
//! key=value config file with sections, overridden by the DASDN_SEED
//! environment variable, overridden by CLI flags (applied by the
//! subcommand handlers in main.rs).

use anyhow::{bail, Context, Result};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub model: ModelSettings,
    pub training: TrainingSettings,
    pub patching: PatchSettings,
    pub simulation: SimSettings,
    pub noise: NoiseSettings,
    pub baselines: BaselineSettings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSettings {
    /// "cpunet" or "plain".
    pub arch: String,
    /// "synthetic" or "field" stage-width preset.
    pub preset: String,
    pub dropout: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSettings {
    pub epochs: usize,
    pub batch: usize,
    pub alpha: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSettings {
    pub side: usize,
    pub overlap: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSettings {
    pub dt_out: f64,
    pub nt: usize,
    pub f0: f64,
    /// Source column; defaults to the model's center when unset.
    pub source_x: Option<usize>,
    pub source_depth: usize,
    /// "strain-rate" or "particle-velocity".
    pub record: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSettings {
    pub target_snr: f64,
    pub synthetic_fraction: f64,
    pub erratic_share: f64,
    pub corner_hz: Option<f64>,
    pub external_dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineSettings {
    pub f_lo: f64,
    pub f_hi: f64,
    pub taper: f64,
    pub sample_rate: f64,
    pub window_t: usize,
    pub window_x: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            seed: 0,
            model: ModelSettings {
                arch: "cpunet".into(),
                preset: "synthetic".into(),
                dropout: dasdn::nn::DROPOUT_RATE_DEFAULT,
                lambda: dasdn::nn::LEAKY_RELU_LAMBDA_DEFAULT,
            },
            training: TrainingSettings {
                epochs: 100,
                batch: 32,
                alpha: dasdn::nn::HUBER_ALPHA_DEFAULT,
                lr: 1e-3,
            },
            patching: PatchSettings {
                side: 48,
                overlap: 0,
            },
            simulation: SimSettings {
                dt_out: 1e-3,
                nt: 800,
                f0: 40.0,
                source_x: None,
                source_depth: 2,
                record: "strain-rate".into(),
            },
            noise: NoiseSettings {
                target_snr: 0.5,
                synthetic_fraction: 0.85,
                erratic_share: 0.25,
                corner_hz: None,
                external_dir: None,
            },
            baselines: BaselineSettings {
                f_lo: 10.0,
                f_hi: 120.0,
                taper: 5.0,
                sample_rate: 1000.0,
                window_t: 1,
                window_x: 5,
            },
        }
    }
}

fn parse<T: std::str::FromStr>(value: &str, key: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| anyhow::anyhow!("config: cannot parse '{value}' for key '{key}'"))
}

impl Settings {
    /// Defaults, then the config file (when given), then DASDN_SEED.
    pub fn load(config_path: Option<&Path>) -> Result<Settings> {
        let mut settings = Settings::default();
        if let Some(path) = config_path {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read config file {}", path.display()))?;
            settings.apply_file(&text)?;
        }
        if let Ok(seed) = std::env::var("DASDN_SEED") {
            settings.seed = parse(&seed, "DASDN_SEED")?;
        }
        Ok(settings)
    }

    fn apply_file(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = line[1..line.len() - 1].trim().to_string();
                match section.as_str() {
                    "model" | "training" | "patching" | "simulation" | "noise" | "baselines" => {}
                    other => bail!("config line {}: unknown section [{other}]", lineno + 1),
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("config line {}: expected key=value", lineno + 1))?;
            let (key, value) = (key.trim(), value.trim());
            self.apply_key(&section, key, value)
                .with_context(|| format!("config line {}", lineno + 1))?;
        }
        Ok(())
    }

    fn apply_key(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        match (section, key) {
            ("", "seed") => self.seed = parse(value, key)?,
            ("model", "arch") => self.model.arch = value.to_string(),
            ("model", "preset") => self.model.preset = value.to_string(),
            ("model", "dropout") => self.model.dropout = parse(value, key)?,
            ("model", "lambda") => self.model.lambda = parse(value, key)?,
            ("training", "epochs") => self.training.epochs = parse(value, key)?,
            ("training", "batch") => self.training.batch = parse(value, key)?,
            ("training", "alpha") => self.training.alpha = parse(value, key)?,
            ("training", "lr") => self.training.lr = parse(value, key)?,
            ("patching", "side") => self.patching.side = parse(value, key)?,
            ("patching", "overlap") => self.patching.overlap = parse(value, key)?,
            ("simulation", "dt-out") => self.simulation.dt_out = parse(value, key)?,
            ("simulation", "nt") => self.simulation.nt = parse(value, key)?,
            ("simulation", "f0") => self.simulation.f0 = parse(value, key)?,
            ("simulation", "source-x") => self.simulation.source_x = Some(parse(value, key)?),
            ("simulation", "source-depth") => self.simulation.source_depth = parse(value, key)?,
            ("simulation", "record") => self.simulation.record = value.to_string(),
            ("noise", "target-snr") => self.noise.target_snr = parse(value, key)?,
            ("noise", "synthetic-fraction") => self.noise.synthetic_fraction = parse(value, key)?,
            ("noise", "erratic-share") => self.noise.erratic_share = parse(value, key)?,
            ("noise", "corner-hz") => self.noise.corner_hz = Some(parse(value, key)?),
            ("noise", "external-dir") => self.noise.external_dir = Some(value.to_string()),
            ("baselines", "f-lo") => self.baselines.f_lo = parse(value, key)?,
            ("baselines", "f-hi") => self.baselines.f_hi = parse(value, key)?,
            ("baselines", "taper") => self.baselines.taper = parse(value, key)?,
            ("baselines", "sample-rate") => self.baselines.sample_rate = parse(value, key)?,
            ("baselines", "window-t") => self.baselines.window_t = parse(value, key)?,
            ("baselines", "window-x") => self.baselines.window_x = parse(value, key)?,
            (s, k) => {
                if s.is_empty() {
                    bail!("config: unknown top-level key '{k}'")
                } else {
                    bail!("config: unknown key '{k}' in section [{s}]")
                }
            }
        }
        Ok(())
    }

    pub fn recording_mode(&self) -> Result<dasdn::wavesim::RecordingMode> {
        match self.simulation.record.as_str() {
            "strain-rate" => Ok(dasdn::wavesim::RecordingMode::StrainRate),
            "particle-velocity" => Ok(dasdn::wavesim::RecordingMode::ParticleVelocity),
            other => bail!("unknown recording mode '{other}' (strain-rate|particle-velocity)"),
        }
    }

    pub fn net_config(&self) -> Result<dasdn::cpunet::CpuNetConfig> {
        let mut cfg = match self.model.preset.as_str() {
            "synthetic" => dasdn::cpunet::CpuNetConfig::synthetic(),
            "field" => dasdn::cpunet::CpuNetConfig::field(),
            other => bail!("unknown model preset '{other}' (synthetic|field)"),
        };
        match self.model.arch.as_str() {
            "cpunet" => {}
            "plain" => {
                cfg.branch_fractions = vec![1.0];
                cfg.use_cm_skips = false;
            }
            other => bail!("unknown architecture '{other}' (cpunet|plain)"),
        }
        cfg.input_dim = self.patching.side * self.patching.side;
        cfg.dropout_rate = self.model.dropout;
        cfg.lambda = self.model.lambda;
        cfg.epochs = self.training.epochs;
        cfg.batch_size = self.training.batch;
        cfg.huber_alpha = self.training.alpha;
        cfg.seed = self.seed;
        Ok(cfg)
    }

    pub fn train_config(&self) -> dasdn::cpunet::TrainConfig {
        dasdn::cpunet::TrainConfig {
            epochs: self.training.epochs,
            batch_size: self.training.batch,
            huber: dasdn::nn::HuberConfig {
                alpha: self.training.alpha,
            },
            adam: dasdn::nn::AdamConfig {
                lr: self.training.lr,
                ..dasdn::nn::AdamConfig::default()
            },
            seed: self.seed,
        }
    }

    pub fn patch_config(&self) -> dasdn::patch::PatchConfig {
        dasdn::patch::PatchConfig {
            side: self.patching.side,
            overlap: self.patching.overlap,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_defaults() {
        let mut s = Settings::default();
        s.apply_file("seed = 9\n[training]\nepochs = 50\n# comment\nbatch = 8\n")
            .unwrap();
        assert_eq!(s.seed, 9);
        assert_eq!(s.training.epochs, 50);
        assert_eq!(s.training.batch, 8);
        assert_eq!(s.training.alpha, 1.2); // untouched default
    }

    #[test]
    fn unknown_key_rejected() {
        let mut s = Settings::default();
        assert!(s.apply_file("[training]\nepcohs = 50\n").is_err());
        assert!(s.apply_file("[nonsense]\n").is_err());
        assert!(s.apply_file("bogus = 1\n").is_err());
    }
}
