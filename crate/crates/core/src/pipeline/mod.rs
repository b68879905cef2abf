//! End-to-end orchestration: configuration, data preparation, stage training
//! with resumable checkpoints, inference and ablations.

mod config;
mod data;
mod run;
mod train;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

pub use config::{
    CoarseSection, DataConfig, FineCondition, FineSection, ModelConfig, PathsConfig, PipelineConfig, SrSection,
    TrainSection, TrainStage,
};
pub use data::{
    dataset_options, default_spec, ensure_dataset, mean_volume, open_dataset, prepare, prepare_target,
    register_and_align, simulate_clinical, PreparedData, PreparedSample, ViewPair,
};
pub use run::{
    infer_sample, repeat_condition, run_ablation, run_pipeline, write_mid_slices, InferenceMode, Models,
    PipelineRun, RunManifest, SampleOutputs, BASELINE_FILE, REPORT_FILE, RUN_MANIFEST_FILE,
};
pub use train::{
    load_coarse, load_fine, load_sr, train_coarse, train_fine, train_prior, train_sr, LossRecord, TrainReport,
};

use crate::coarsediff::CoarseConfig;
use crate::error::{Error, Result};
use crate::finediff::FineConfig;
use crate::srnet::SrConfig;
use crate::voxcore::mix64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Coarse,
    Prior,
    Fine,
    Sr,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Coarse => "coarse",
            Stage::Prior => "prior",
            Stage::Fine => "fine",
            Stage::Sr => "sr",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Stage::Coarse => 0xc0a5e,
            Stage::Prior => 0x9e10,
            Stage::Fine => 0xf1de,
            Stage::Sr => 0x5e5e,
        }
    }

    /// Seed for this stage's parameter initialization and per-epoch streams.
    pub fn seed(self, cfg: &PipelineConfig) -> u64 {
        mix64(cfg.seed ^ self.salt())
    }

    /// Checkpoint base name; encodes every config switch the weights depend on.
    pub fn checkpoint_tag(self, cfg: &PipelineConfig) -> String {
        let coarse = format!(
            "{}{}",
            if cfg.model.bi_planar { "bi" } else { "single" },
            if cfg.model.use_drr_mix { "-drrmix" } else { "" }
        );
        let fine = match cfg.model.fine_condition {
            FineCondition::Coarse => coarse.clone(),
            FineCondition::Repeat => "repeat".to_string(),
        };
        match self {
            Stage::Coarse => format!("coarse-{coarse}"),
            Stage::Prior => "prior".to_string(),
            Stage::Fine => format!("fine-{fine}"),
            Stage::Sr if cfg.sr.use_synthetic_inputs => format!("sr-syn-{fine}"),
            Stage::Sr => "sr".to_string(),
        }
    }

    pub fn files(self, cfg: &PipelineConfig) -> StageFiles {
        let tag = self.checkpoint_tag(cfg);
        let dir = &cfg.paths.checkpoints;
        StageFiles {
            model: dir.join(format!("{tag}.vnet")),
            optimizer: dir.join(format!("{tag}.opt.vnet")),
            log: dir.join(format!("{tag}_loss.jsonl")),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageFiles {
    pub model: PathBuf,
    pub optimizer: PathBuf,
    /// JSON lines `{"epoch": k, "loss": x}`.
    pub log: PathBuf,
}

pub fn coarse_config(cfg: &PipelineConfig, spacing: [f64; 3]) -> CoarseConfig {
    let c = &cfg.coarse;
    CoarseConfig {
        proj_size: cfg.proj_size(),
        r: cfg.model.r,
        bi_planar: cfg.model.bi_planar,
        enc_channels: c.enc_channels,
        unet_base: c.unet_base,
        unet_mults: c.unet_mults.clone(),
        bridge_t: c.bridge_t,
        s_max: c.s_max,
        spacing,
    }
}

pub fn fine_config(cfg: &PipelineConfig, spacing: [f64; 3]) -> FineConfig {
    let f = &cfg.fine;
    FineConfig {
        size: cfg.size(),
        unet_base: f.unet_base,
        unet_mults: f.unet_mults.clone(),
        ddpm_t: f.ddpm_t,
        beta_start: f.beta_start,
        beta_end: f.beta_end,
        clamp_output: cfg.model.clamp_output,
        spacing,
    }
}

pub fn sr_config(cfg: &PipelineConfig) -> SrConfig {
    SrConfig { gamma: cfg.model.gamma, n_rrdb: cfg.sr.n_rrdb, base_features: cfg.sr.base_features }
}

/// One-at-a-time ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// Toggles clamping of `x̂_0` during fine sampling; no retraining.
    Clamping,
    BiPlanar,
    DrrMix,
    /// Skips the fine stage and evaluates `X̂`.
    CoarseOnly,
    /// Skips the coarse stage; the fine stage is conditioned on the PA view
    /// repeated along the beam axis.
    FineOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 5] =
        [Ablation::Clamping, Ablation::BiPlanar, Ablation::DrrMix, Ablation::CoarseOnly, Ablation::FineOnly];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Clamping => "clamping",
            Ablation::BiPlanar => "bi-planar",
            Ablation::DrrMix => "drr-mix",
            Ablation::CoarseOnly => "coarse-only",
            Ablation::FineOnly => "fine-only",
        }
    }

    fn valid_list() -> String {
        Self::ALL.iter().map(|a| a.name()).collect::<Vec<_>>().join(", ")
    }

    /// Exactly one switch must be given.
    pub fn from_switches<S: AsRef<str>>(switches: &[S]) -> Result<Self> {
        match switches {
            [one] => one.as_ref().parse(),
            [] => Err(Error::Config(format!("no ablation switch given; valid switches: {}", Self::valid_list()))),
            _ => Err(Error::Config(format!(
                "ablations run one switch at a time, got {}; valid switches: {}",
                switches.len(),
                Self::valid_list()
            ))),
        }
    }

    /// The variant's config and inference mode.
    pub fn apply(self, cfg: &PipelineConfig) -> (PipelineConfig, InferenceMode) {
        let mut c = cfg.clone();
        let mut mode = InferenceMode::for_config(cfg);
        match self {
            Ablation::Clamping => c.model.clamp_output = !c.model.clamp_output,
            Ablation::BiPlanar => c.model.bi_planar = !c.model.bi_planar,
            Ablation::DrrMix => c.model.use_drr_mix = !c.model.use_drr_mix,
            Ablation::CoarseOnly => mode = InferenceMode::CoarseOnly,
            Ablation::FineOnly => {
                c.model.fine_condition = FineCondition::Repeat;
                mode = InferenceMode::FineOnly;
            }
        }
        (c, mode)
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation switch `{s}`; valid switches: {}", Self::valid_list())))
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
