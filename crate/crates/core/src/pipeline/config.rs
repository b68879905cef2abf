use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::WindowSpec;
use crate::schedules::{ddim_plan, DdimPlan};

/// Every field is required and unknown keys are rejected, so a config file
/// fully determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub coarse: CoarseSection,
    pub fine: FineSection,
    pub sr: SrSection,
    pub train: TrainSection,
    pub paths: PathsConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_phantoms: usize,
    pub sid_mm: f64,
    pub lateral: bool,
    pub window_lo: f64,
    pub window_hi: f64,
    /// Detector noise of the simulated clinical radiographs, in `[0, 1]` units.
    pub xray_noise: f64,
    /// Bound on the random misalignment of simulated clinical radiographs, px.
    pub xray_max_shift: f64,
    pub register_radius: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FineCondition {
    /// Condition on the coarse estimate `X̂`.
    Coarse,
    /// Condition on the PA view repeated along the beam axis; no coarse stage.
    Repeat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Grid of the diffusion stages, `[h, w, d]`. Must be cubic.
    pub dims: [usize; 3],
    /// Output grid `[H, W, D] = γ·[h, w, d]`; also the phantom grid.
    pub full_dims: [usize; 3],
    /// Scale ratio `γ`; the SR stage runs only when it is 2.
    pub gamma: usize,
    /// Projection side is `r·h`.
    pub r: usize,
    pub bi_planar: bool,
    pub clamp_output: bool,
    /// Also train the coarse stage on clean DRRs, not only on clinical-style
    /// radiographs.
    pub use_drr_mix: bool,
    pub fine_condition: FineCondition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoarseSection {
    pub enc_channels: usize,
    pub unet_base: usize,
    pub unet_mults: Vec<usize>,
    pub bridge_t: usize,
    pub s_max: f64,
    pub ddim_steps: usize,
    pub eta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineSection {
    pub unet_base: usize,
    pub unet_mults: Vec<usize>,
    pub ddpm_t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub ddim_steps: usize,
    pub eta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SrSection {
    pub n_rrdb: usize,
    pub base_features: usize,
    pub use_synthetic_inputs: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainStage {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub coarse: TrainStage,
    pub prior: TrainStage,
    pub fine: TrainStage,
    pub sr: TrainStage,
}

/// Relative paths are resolved against the directory of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub output: PathBuf,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates a config; relative paths become relative to the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.paths.dataset, &mut cfg.paths.checkpoints, &mut cfg.paths.output] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.dims[0] == 0 || m.dims.iter().any(|&n| n != m.dims[0]) {
            return Err(config_err(format!("model.dims must be cubic and non-empty, got {:?}", m.dims)));
        }
        if !(m.gamma == 1 || m.gamma == 2) {
            return Err(config_err(format!("model.gamma must be 1 or 2, got {}", m.gamma)));
        }
        if m.full_dims != m.dims.map(|n| n * m.gamma) {
            return Err(config_err(format!(
                "model.full_dims {:?} must equal gamma × model.dims = {:?}",
                m.full_dims,
                m.dims.map(|n| n * m.gamma)
            )));
        }
        if m.r == 0 || !m.r.is_power_of_two() {
            return Err(config_err(format!("model.r must be a power of two, got {}", m.r)));
        }
        if m.bi_planar && !self.data.lateral {
            return Err(config_err("model.bi_planar needs data.lateral = true"));
        }
        WindowSpec::new(self.data.window_lo, self.data.window_hi).map_err(|e| config_err(format!("data window: {e}")))?;
        if self.data.n_phantoms == 0 {
            return Err(config_err("data.n_phantoms must be positive"));
        }
        if self.data.register_radius == 0 {
            return Err(config_err("data.register_radius must be at least 1"));
        }
        if !(self.data.xray_noise >= 0.0) || !(self.data.xray_max_shift >= 0.0) {
            return Err(config_err("data.xray_noise and data.xray_max_shift must be non-negative"));
        }
        if self.data.xray_max_shift + 1.0 > self.data.register_radius as f64 {
            return Err(config_err("data.register_radius must exceed data.xray_max_shift by at least 1"));
        }
        for (name, s) in [
            ("coarse", &self.train.coarse),
            ("prior", &self.train.prior),
            ("fine", &self.train.fine),
            ("sr", &self.train.sr),
        ] {
            if s.batch == 0 || !(s.lr > 0.0) {
                return Err(config_err(format!("train.{name}: batch and lr must be positive")));
            }
        }
        self.coarse_plan()?;
        self.fine_plan()?;
        Ok(())
    }

    /// `h`, the edge of the diffusion grid.
    pub fn size(&self) -> usize {
        self.model.dims[0]
    }

    /// `H = γ·h`, the phantom and output edge.
    pub fn full_size(&self) -> usize {
        self.model.full_dims[0]
    }

    pub fn proj_size(&self) -> usize {
        self.model.r * self.size()
    }

    pub fn window(&self) -> WindowSpec {
        WindowSpec { lo: self.data.window_lo, hi: self.data.window_hi }
    }

    pub fn coarse_plan(&self) -> Result<DdimPlan> {
        let c = &self.coarse;
        ddim_plan(c.bridge_t, c.ddim_steps, c.eta).map_err(|e| config_err(format!("coarse sampling plan: {e}")))
    }

    pub fn fine_plan(&self) -> Result<DdimPlan> {
        let f = &self.fine;
        ddim_plan(f.ddpm_t, f.ddim_steps, f.eta).map_err(|e| config_err(format!("fine sampling plan: {e}")))
    }

    /// Small configuration: 8³ diffusion grid, 16³ output, 64² radiographs.
    pub fn toy() -> Self {
        Self {
            seed: 1234,
            data: DataConfig {
                n_phantoms: 80,
                sid_mm: 1000.0,
                lateral: true,
                window_lo: -1000.0,
                window_hi: 1000.0,
                xray_noise: 0.02,
                xray_max_shift: 3.0,
                register_radius: 5,
            },
            model: ModelConfig {
                dims: [8, 8, 8],
                full_dims: [16, 16, 16],
                gamma: 2,
                r: 8,
                bi_planar: true,
                clamp_output: true,
                use_drr_mix: true,
                fine_condition: FineCondition::Coarse,
            },
            coarse: CoarseSection {
                enc_channels: 8,
                unet_base: 8,
                unet_mults: vec![1, 2, 4],
                bridge_t: 100,
                s_max: 1.0,
                ddim_steps: 10,
                eta: 0.0,
            },
            fine: FineSection {
                unet_base: 8,
                unet_mults: vec![1, 2, 4],
                ddpm_t: 100,
                beta_start: 1e-3,
                beta_end: 0.2,
                ddim_steps: 20,
                eta: 0.0,
            },
            sr: SrSection { n_rrdb: 2, base_features: 8, use_synthetic_inputs: false },
            train: TrainSection {
                coarse: TrainStage { epochs: 60, lr: 2e-3, batch: 4 },
                prior: TrainStage { epochs: 100, lr: 2e-3, batch: 4 },
                fine: TrainStage { epochs: 300, lr: 2e-3, batch: 4 },
                sr: TrainStage { epochs: 100, lr: 2e-3, batch: 1 },
            },
            paths: PathsConfig {
                dataset: "data".into(),
                checkpoints: "checkpoints".into(),
                output: "out".into(),
            },
        }
    }
}
