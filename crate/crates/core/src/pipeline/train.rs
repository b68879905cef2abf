use std::fs;
use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::config::{FineCondition, PipelineConfig, TrainStage};
use super::data::{PreparedData, PreparedSample};
use super::run::{coarse_estimate, fine_estimate, repeat_condition};
use super::{coarse_config, fine_config, sr_config, Stage, StageFiles};
use crate::coarsediff::{coarse_train_step, CoarseModel, CoarseSample, Views};
use crate::error::{Error, Result};
use crate::finediff::{fine_train_step, prior_train_step, FineModel};
use crate::nnet::{adam_step, load_vnet, save_vnet, AdamState, Grads, ParamStore, Tensor};
use crate::phantom::Split;
use crate::srnet::{sr_loss, SrModel, SrPair};
use crate::voxcore::{DomainTag, SeededRng, Volume};

const META_EPOCH: &str = "meta.epoch";
const META_STEP: &str = "meta.step";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub stage: Stage,
    pub checkpoint: PathBuf,
    /// Epochs already completed before this call.
    pub resumed_from: usize,
    /// Losses of the epochs run by this call.
    pub losses: Vec<LossRecord>,
}

fn missing(stage: Stage, files: &StageFiles) -> Error {
    Error::MissingCheckpoint { stage: stage.name().to_string(), path: files.model.display().to_string() }
}

fn load_into(stage: Stage, cfg: &PipelineConfig, params: &mut ParamStore) -> Result<()> {
    let files = stage.files(cfg);
    if !files.model.exists() {
        return Err(missing(stage, &files));
    }
    params.load_entries(load_vnet(&files.model)?)
}

fn read_log(path: &PathBuf) -> Result<Vec<LossRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Restores model and optimizer from the stage checkpoint when one exists
/// (unless `restart`), returning the optimizer and the completed epoch count.
/// The loss log is trimmed to the completed epochs.
fn resume_or_start(files: &StageFiles, params: &mut ParamStore, lr: f64, restart: bool) -> Result<(AdamState, usize)> {
    let mut opt = AdamState::new(params, lr);
    if restart || !files.model.exists() || !files.optimizer.exists() {
        if let Some(dir) = files.log.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&files.log, "")?;
        return Ok((opt, 0));
    }
    params.load_entries(load_vnet(&files.model)?)?;
    let mut entries = load_vnet(&files.optimizer)?;
    let mut meta = |name: &str| -> Result<u64> {
        let i = entries
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("optimizer checkpoint lacks `{name}`")))?;
        Ok(entries.remove(i).1.data()[0] as u64)
    };
    let done = meta(META_EPOCH)? as usize;
    let step = meta(META_STEP)?;
    opt.restore(params, entries, step)?;
    let kept: Vec<LossRecord> = read_log(&files.log)?.into_iter().filter(|r| r.epoch <= done).collect();
    let mut text = String::new();
    for r in &kept {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(&files.log, text)?;
    Ok((opt, done))
}

fn save_progress(files: &StageFiles, params: &ParamStore, opt: &AdamState, rec: LossRecord) -> Result<()> {
    save_vnet(&params.entries(), &files.model)?;
    let mut entries = opt.entries(params);
    entries.push((META_EPOCH.to_string(), Tensor::scalar(rec.epoch as f64)));
    entries.push((META_STEP.to_string(), Tensor::scalar(opt.step_count() as f64)));
    save_vnet(&entries, &files.optimizer)?;
    let mut log = fs::OpenOptions::new().create(true).append(true).open(&files.log)?;
    writeln!(log, "{}", serde_json::to_string(&rec)?)?;
    Ok(())
}

/// Runs epochs `done+1..=epochs`, checkpointing after each. `epoch_fn`
/// performs one pass and returns its mean loss; it gets a stream specific to
/// the epoch, so resumed runs match uninterrupted ones.
#[allow(clippy::too_many_arguments)]
fn run_epochs<M>(
    cfg: &PipelineConfig,
    stage: Stage,
    model: &mut M,
    params: fn(&M) -> &ParamStore,
    opt: &mut AdamState,
    done: usize,
    settings: &TrainStage,
    mut epoch_fn: impl FnMut(&mut M, &mut AdamState, &mut SeededRng) -> Result<f64>,
) -> Result<TrainReport> {
    let files = stage.files(cfg);
    let mut losses = Vec::new();
    for epoch in done + 1..=settings.epochs {
        let mut rng = SeededRng::new(stage.seed(cfg), epoch as u64);
        let loss = epoch_fn(model, opt, &mut rng)?;
        let rec = LossRecord { epoch, loss };
        save_progress(&files, params(model), opt, rec)?;
        losses.push(rec);
    }
    Ok(TrainReport { stage, checkpoint: files.model, resumed_from: done, losses })
}

fn train_split(data: &PreparedData) -> Result<Vec<&PreparedSample>> {
    let s = data.split(Split::Train);
    if s.is_empty() {
        return Err(Error::Config("the dataset has no training subjects".into()));
    }
    Ok(s)
}

/// Spacing of the diffusion grid.
fn grid_spacing(data: &PreparedData) -> Result<[f64; 3]> {
    data.samples
        .first()
        .map(|s| s.target.spacing())
        .ok_or_else(|| Error::Config("the dataset is empty".into()))
}

fn shuffled(n: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order
}

pub fn train_coarse(cfg: &PipelineConfig, data: &PreparedData, restart: bool) -> Result<TrainReport> {
    let stage = Stage::Coarse;
    let settings = &cfg.train.coarse;
    let mut m = CoarseModel::new(coarse_config(cfg, grid_spacing(data)?), stage.seed(cfg))?;
    let (mut opt, done) = resume_or_start(&stage.files(cfg), &mut m.params, settings.lr, restart)?;
    let train = train_split(data)?;
    let bi = cfg.model.bi_planar;
    let xray: Vec<Views> = train.iter().map(|s| s.xray.views(bi)).collect::<Result<_>>()?;
    let drr: Vec<Views> = train.iter().map(|s| s.drr.views(bi)).collect::<Result<_>>()?;
    let mix = cfg.model.use_drr_mix;
    run_epochs(cfg, stage, &mut m, |m| &m.params, &mut opt, done, settings, |m, opt, rng| {
        let order = shuffled(train.len(), rng);
        let (mut sum, mut steps) = (0.0, 0);
        for chunk in order.chunks(settings.batch) {
            let batch: Vec<CoarseSample> = chunk
                .iter()
                .map(|&i| {
                    let views = if mix && rng.uniform() < 0.5 { &drr[i] } else { &xray[i] };
                    CoarseSample { x0: &train[i].target, views }
                })
                .collect();
            sum += coarse_train_step(m, opt, &batch, rng)?;
            steps += 1;
        }
        Ok(sum / steps as f64)
    })
}

pub fn train_prior(cfg: &PipelineConfig, data: &PreparedData, restart: bool) -> Result<TrainReport> {
    let stage = Stage::Prior;
    let settings = &cfg.train.prior;
    let mut m = FineModel::new(fine_config(cfg, grid_spacing(data)?), stage.seed(cfg))?;
    let (mut opt, done) = resume_or_start(&stage.files(cfg), &mut m.params, settings.lr, restart)?;
    let train = train_split(data)?;
    run_epochs(cfg, stage, &mut m, |m| &m.params, &mut opt, done, settings, |m, opt, rng| {
        let order = shuffled(train.len(), rng);
        let (mut sum, mut steps) = (0.0, 0);
        for chunk in order.chunks(settings.batch) {
            let batch: Vec<&Volume> = chunk.iter().map(|&i| &train[i].target).collect();
            sum += prior_train_step(m, opt, &batch, rng)?;
            steps += 1;
        }
        Ok(sum / steps as f64)
    })
}

/// Fine model with the trained prior loaded and a fresh control branch.
fn fine_with_prior(cfg: &PipelineConfig, spacing: [f64; 3]) -> Result<FineModel> {
    let mut m = FineModel::new(fine_config(cfg, spacing), Stage::Prior.seed(cfg))?;
    load_into(Stage::Prior, cfg, &mut m.params)?;
    m.attach_control(Stage::Fine.seed(cfg))?;
    Ok(m)
}

/// Conditions the fine stage sees for `samples`: the coarse estimate, or the
/// repeated PA view.
fn fine_conditions(cfg: &PipelineConfig, samples: &[&PreparedSample], spacing: [f64; 3]) -> Result<Vec<Volume>> {
    match cfg.model.fine_condition {
        FineCondition::Coarse => {
            let coarse = load_coarse(cfg, spacing)?;
            samples.iter().map(|s| coarse_estimate(cfg, &coarse, s)).collect()
        }
        FineCondition::Repeat => samples.iter().map(|s| repeat_condition(&s.xray.pa, cfg.size(), spacing)).collect(),
    }
}

pub fn train_fine(cfg: &PipelineConfig, data: &PreparedData, restart: bool) -> Result<TrainReport> {
    let stage = Stage::Fine;
    let settings = &cfg.train.fine;
    let spacing = grid_spacing(data)?;
    let mut m = fine_with_prior(cfg, spacing)?;
    let train = train_split(data)?;
    let conds = fine_conditions(cfg, &train, spacing)?;
    let (mut opt, done) = resume_or_start(&stage.files(cfg), &mut m.params, settings.lr, restart)?;
    run_epochs(cfg, stage, &mut m, |m| &m.params, &mut opt, done, settings, |m, opt, rng| {
        let order = shuffled(train.len(), rng);
        let (mut sum, mut steps) = (0.0, 0);
        for chunk in order.chunks(settings.batch) {
            let ys: Vec<&Volume> = chunk.iter().map(|&i| &train[i].target).collect();
            let cs: Vec<&Volume> = chunk.iter().map(|&i| &conds[i]).collect();
            sum += fine_train_step(m, opt, &ys, &cs, rng)?;
            steps += 1;
        }
        Ok(sum / steps as f64)
    })
}

fn clamp_pm1(v: &Volume) -> Result<Volume> {
    v.map(DomainTag::NormalizedPm1, |x| x.clamp(-1.0, 1.0))
}

pub fn train_sr(cfg: &PipelineConfig, data: &PreparedData, restart: bool) -> Result<TrainReport> {
    let stage = Stage::Sr;
    if cfg.model.gamma < 2 {
        return Err(Error::Config("model.gamma = 1 needs no SR stage".into()));
    }
    let settings = &cfg.train.sr;
    let spacing = grid_spacing(data)?;
    let mut m = SrModel::new(sr_config(cfg), stage.seed(cfg))?;
    let train = train_split(data)?;
    let use_syn = cfg.sr.use_synthetic_inputs;
    let synthetic: Vec<Option<Volume>> = if use_syn {
        let conds = fine_conditions(cfg, &train, spacing)?;
        let fine = load_fine(cfg, spacing)?;
        train
            .iter()
            .zip(&conds)
            .map(|(s, c)| fine_estimate(cfg, &fine, s, c).and_then(|y| clamp_pm1(&y)).map(Some))
            .collect::<Result<_>>()?
    } else {
        vec![None; train.len()]
    };
    let pairs: Vec<SrPair> = train
        .iter()
        .zip(synthetic)
        .map(|(s, syn)| SrPair { high: s.target_full.clone(), downsampled: s.target.clone(), synthetic: syn })
        .collect();
    let (mut opt, done) = resume_or_start(&stage.files(cfg), &mut m.params, settings.lr, restart)?;
    run_epochs(cfg, stage, &mut m, |m| &m.params, &mut opt, done, settings, |m, opt, rng| {
        let order = shuffled(pairs.len(), rng);
        let (mut sum, mut steps) = (0.0, 0);
        for chunk in order.chunks(settings.batch) {
            let mut grads = Grads::empty(m.params.len());
            let mut loss = 0.0;
            for &i in chunk {
                let (l, g) = sr_loss(m, pairs[i].input(use_syn)?, &pairs[i].high)?;
                grads.accumulate(&g)?;
                loss += l;
            }
            let k = chunk.len() as f64;
            grads.scale(1.0 / k);
            adam_step(&mut m.params, opt, &grads)?;
            sum += loss / k;
            steps += 1;
        }
        Ok(sum / steps as f64)
    })
}

/// Trained coarse model for the config variant.
pub fn load_coarse(cfg: &PipelineConfig, spacing: [f64; 3]) -> Result<CoarseModel> {
    let mut m = CoarseModel::new(coarse_config(cfg, spacing), Stage::Coarse.seed(cfg))?;
    load_into(Stage::Coarse, cfg, &mut m.params)?;
    Ok(m)
}

/// Trained fine model (prior plus control branch) for the config variant.
pub fn load_fine(cfg: &PipelineConfig, spacing: [f64; 3]) -> Result<FineModel> {
    let mut m = FineModel::new(fine_config(cfg, spacing), Stage::Prior.seed(cfg))?;
    m.attach_control(Stage::Fine.seed(cfg))?;
    load_into(Stage::Fine, cfg, &mut m.params)?;
    Ok(m)
}

pub fn load_sr(cfg: &PipelineConfig) -> Result<SrModel> {
    let mut m = SrModel::new(sr_config(cfg), Stage::Sr.seed(cfg))?;
    load_into(Stage::Sr, cfg, &mut m.params)?;
    Ok(m)
}
