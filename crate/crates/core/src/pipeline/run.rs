use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{FineCondition, PipelineConfig};
use super::data::{mean_volume, prepare, PreparedSample};
use super::train::{load_coarse, load_fine, load_sr};
use super::{Ablation, Stage};
use crate::coarsediff::{bridge_sample, CoarseModel};
use crate::error::{Error, Result};
use crate::finediff::{fine_sample, FineModel};
use crate::metrics::{evaluate_batch, to_unit_range, MetricReport, MetricSummary};
use crate::phantom::{id_hash, Split};
use crate::srnet::SrModel;
use crate::voxcore::{encode_pgm16, mix64, save_vvol, DomainTag, Projection, SeededRng, Volume};

/// Which stages produce the evaluated volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceMode {
    /// Coarse, then fine conditioned on `X̂`, then SR when `γ = 2`.
    Full,
    /// Coarse, then SR; the fine stage is skipped.
    CoarseOnly,
    /// Fine conditioned on the repeated PA view, then SR.
    FineOnly,
}

impl InferenceMode {
    pub fn for_config(cfg: &PipelineConfig) -> Self {
        match cfg.model.fine_condition {
            FineCondition::Coarse => InferenceMode::Full,
            FineCondition::Repeat => InferenceMode::FineOnly,
        }
    }
}

fn sample_rng(cfg: &PipelineConfig, id: &str, stage: Stage) -> SeededRng {
    SeededRng::new(mix64(stage.seed(cfg) ^ id_hash(id)), 0x5a)
}

/// `X̂` for one subject from its clinical-style radiographs.
pub(crate) fn coarse_estimate(cfg: &PipelineConfig, m: &CoarseModel, s: &PreparedSample) -> Result<Volume> {
    let views = s.xray.views(cfg.model.bi_planar)?;
    bridge_sample(m, &views, &cfg.coarse_plan()?, &mut sample_rng(cfg, &s.id, Stage::Coarse))
}

/// `Ŷ` for one subject given its condition volume.
pub(crate) fn fine_estimate(cfg: &PipelineConfig, m: &FineModel, s: &PreparedSample, cond: &Volume) -> Result<Volume> {
    fine_sample(m, Some(cond), &cfg.fine_plan()?, &mut sample_rng(cfg, &s.id, Stage::Fine))
}

/// Lifts a PA image to an `n³` volume: block-average to `n × n`, then repeat
/// along the beam (y) axis. Image rows map to z, columns to x.
pub fn repeat_condition(pa: &Projection, n: usize, spacing: [f64; 3]) -> Result<Volume> {
    let [w, h] = pa.dims();
    if n == 0 || w % n != 0 || h % n != 0 {
        return Err(Error::Shape(format!("projection {:?} does not tile into {n}×{n} blocks", pa.dims())));
    }
    let (bu, bv) = (w / n, h / n);
    let mut small = vec![0.0; n * n];
    for (j, row) in small.chunks_mut(n).enumerate() {
        for (i, cell) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for v in j * bv..(j + 1) * bv {
                for u in i * bu..(i + 1) * bu {
                    acc += pa.get(u, v);
                }
            }
            *cell = acc / (bu * bv) as f64;
        }
    }
    let mut data = Vec::with_capacity(n * n * n);
    for z in 0..n {
        for _y in 0..n {
            data.extend_from_slice(&small[z * n..(z + 1) * n]);
        }
    }
    Volume::from_data([n; 3], spacing, data, DomainTag::Hu)
}

fn clamp_pm1(v: &Volume) -> Result<Volume> {
    v.map(DomainTag::NormalizedPm1, |x| x.clamp(-1.0, 1.0))
}

/// The trained networks a mode needs.
pub struct Models {
    pub coarse: Option<CoarseModel>,
    pub fine: Option<FineModel>,
    pub sr: Option<SrModel>,
}

impl Models {
    /// Loads checkpoints in pipeline order, so the first missing one names
    /// its stage.
    pub fn load(cfg: &PipelineConfig, mode: InferenceMode, spacing: [f64; 3]) -> Result<Self> {
        let coarse = if mode != InferenceMode::FineOnly { Some(load_coarse(cfg, spacing)?) } else { None };
        let fine = if mode != InferenceMode::CoarseOnly { Some(load_fine(cfg, spacing)?) } else { None };
        let sr = if cfg.model.gamma >= 2 { Some(load_sr(cfg)?) } else { None };
        Ok(Self { coarse, fine, sr })
    }
}

/// Intermediate and final volumes for one subject.
#[derive(Clone, Debug)]
pub struct SampleOutputs {
    pub id: String,
    /// `X̂` on the diffusion grid.
    pub coarse: Option<Volume>,
    /// `Ŷ` on the diffusion grid.
    pub fine: Option<Volume>,
    /// `Ŷ_sr` on the output grid.
    pub sr: Option<Volume>,
}

impl SampleOutputs {
    /// The volume that is evaluated: SR output if present, else `Ŷ`, else `X̂`.
    pub fn final_volume(&self) -> &Volume {
        self.sr.as_ref().or(self.fine.as_ref()).or(self.coarse.as_ref()).expect("at least one stage ran")
    }
}

fn need<'a, T>(m: &'a Option<T>, stage: Stage) -> Result<&'a T> {
    m.as_ref().ok_or_else(|| Error::Config(format!("stage `{stage}` is required but not loaded")))
}

pub fn infer_sample(
    cfg: &PipelineConfig,
    models: &Models,
    mode: InferenceMode,
    s: &PreparedSample,
) -> Result<SampleOutputs> {
    let coarse = match mode {
        InferenceMode::FineOnly => None,
        _ => Some(coarse_estimate(cfg, need(&models.coarse, Stage::Coarse)?, s)?),
    };
    let cond = match mode {
        InferenceMode::Full => coarse.clone(),
        InferenceMode::FineOnly => Some(repeat_condition(&s.xray.pa, cfg.size(), s.target.spacing())?),
        InferenceMode::CoarseOnly => None,
    };
    let fine = match &cond {
        Some(c) => Some(fine_estimate(cfg, need(&models.fine, Stage::Fine)?, s, c)?),
        None => None,
    };
    let last = fine.as_ref().or(coarse.as_ref()).expect("at least one stage ran");
    let sr = if cfg.model.gamma >= 2 {
        Some(need(&models.sr, Stage::Sr)?.forward(&clamp_pm1(last)?)?)
    } else {
        None
    };
    Ok(SampleOutputs { id: s.id.clone(), coarse, fine, sr })
}

/// Everything a pipeline run wrote, relative to its output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub mode: InferenceMode,
    pub checkpoints: Vec<String>,
    pub summary: MetricSummary,
    /// Metrics of predicting the mean training volume for every subject.
    pub mean_volume_baseline: MetricSummary,
    pub files: Vec<String>,
}

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const REPORT_FILE: &str = "report.jsonl";
pub const BASELINE_FILE: &str = "baseline_report.jsonl";

#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub outputs: Vec<SampleOutputs>,
    pub report: MetricReport,
    pub baseline: MetricReport,
    pub manifest: RunManifest,
    pub out_dir: PathBuf,
}

/// Writes `{prefix}_axial.pgm`, `_sagittal`, `_coronal` and returns their names.
pub fn write_mid_slices(v: &Volume, dir: &Path, prefix: &str) -> Result<Vec<String>> {
    let unit = to_unit_range(v)?;
    let mut names = Vec::new();
    for (axis, plane) in [(2, "axial"), (0, "sagittal"), (1, "coronal")] {
        let name = format!("{prefix}_{plane}.pgm");
        fs::write(dir.join(&name), encode_pgm16(&unit.mid_slice(axis)?)?)?;
        names.push(name);
    }
    Ok(names)
}

fn checkpoint_names(cfg: &PipelineConfig, mode: InferenceMode) -> Vec<String> {
    let mut stages = Vec::new();
    if mode != InferenceMode::FineOnly {
        stages.push(Stage::Coarse);
    }
    if mode != InferenceMode::CoarseOnly {
        stages.push(Stage::Fine);
    }
    if cfg.model.gamma >= 2 {
        stages.push(Stage::Sr);
    }
    stages
        .into_iter()
        .map(|s| s.files(cfg).model.file_name().unwrap().to_string_lossy().into_owned())
        .collect()
}

/// Runs inference on the test split, writes volumes, slices and reports to
/// `out_dir`.
pub fn run_pipeline(cfg: &PipelineConfig, mode: InferenceMode, out_dir: &Path) -> Result<PipelineRun> {
    let data = prepare(cfg)?;
    let test = data.split(Split::Test);
    if test.is_empty() {
        return Err(Error::Config("the dataset has no test subjects".into()));
    }
    let spacing = test[0].target.spacing();
    let models = Models::load(cfg, mode, spacing)?;
    fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    let mut outputs = Vec::with_capacity(test.len());
    let mut pairs = Vec::with_capacity(test.len());
    for s in &test {
        let o = infer_sample(cfg, &models, mode, s)?;
        for (tag, v) in [("coarse", &o.coarse), ("fine", &o.fine), ("sr", &o.sr)] {
            if let Some(v) = v {
                let name = format!("{}_{tag}.vvol", s.id);
                save_vvol(v, out_dir.join(&name))?;
                files.push(name);
            }
        }
        files.extend(write_mid_slices(o.final_volume(), out_dir, &s.id)?);
        pairs.push((s.id.clone(), o.final_volume().clone(), s.target_full.clone()));
        outputs.push(o);
    }
    let report = evaluate_batch(&pairs)?;
    fs::write(out_dir.join(REPORT_FILE), report.to_jsonl()?)?;
    files.push(REPORT_FILE.to_string());

    let mean = mean_volume(&data.split(Split::Train))?;
    let base_pairs: Vec<_> = test.iter().map(|s| (s.id.clone(), mean.clone(), s.target_full.clone())).collect();
    let baseline = evaluate_batch(&base_pairs)?;
    fs::write(out_dir.join(BASELINE_FILE), baseline.to_jsonl()?)?;
    files.push(BASELINE_FILE.to_string());

    files.push(RUN_MANIFEST_FILE.to_string());
    let manifest = RunManifest {
        seed: cfg.seed,
        mode,
        checkpoints: checkpoint_names(cfg, mode),
        summary: report.summary(),
        mean_volume_baseline: baseline.summary(),
        files,
    };
    fs::write(out_dir.join(RUN_MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(PipelineRun { outputs, report, baseline, manifest, out_dir: out_dir.to_path_buf() })
}

/// Evaluates one ablation variant; results go to `<output>/ablate-<switch>`.
pub fn run_ablation(cfg: &PipelineConfig, ablation: Ablation) -> Result<PipelineRun> {
    let (variant, mode) = ablation.apply(cfg);
    let dir = cfg.paths.output.join(format!("ablate-{}", ablation.name()));
    run_pipeline(&variant, mode, &dir)
}
