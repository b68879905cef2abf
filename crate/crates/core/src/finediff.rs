//! 3D→3D refinement stage.
//!
//! An unconditional DDPM prior `ε_θ(y_t, t)` is trained on CT volumes, then
//! frozen. A control branch, fed with the coarse estimate `X̂`, steers the
//! frozen prior through zero-initialized projections.

use crate::error::{invalid, shape, Error, Result};
use crate::nnet::{adam_step, AdamState, ControlBranch, Grads, ParamStore, Tape, Tensor, UNet3d, UNetConfig};
use crate::schedules::{DdimPlan, DdpmSchedule};
use crate::voxcore::{DomainTag, SeededRng, Volume};

pub const PRIOR_PREFIX: &str = "prior";
pub const CONTROL_PREFIX: &str = "control";

#[derive(Clone, Debug, PartialEq)]
pub struct FineConfig {
    /// Edge of the cubic volumes the stage operates on.
    pub size: usize,
    pub unet_base: usize,
    pub unet_mults: Vec<usize>,
    pub ddpm_t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub clamp_output: bool,
    pub spacing: [f64; 3],
}

pub struct FineModel {
    pub params: ParamStore,
    pub backbone: UNet3d,
    pub control: Option<ControlBranch>,
    pub schedule: DdpmSchedule,
    pub clamp_output: bool,
    backbone_frozen: bool,
    cfg: FineConfig,
}

impl FineModel {
    /// Unconditional prior only; trainable.
    pub fn new(cfg: FineConfig, seed: u64) -> Result<Self> {
        let mut rng = SeededRng::new(seed, 0xf1e);
        let mut params = ParamStore::new();
        let unet_cfg = UNetConfig {
            base_channels: cfg.unet_base,
            channel_mults: cfg.unet_mults.clone(),
            ..UNetConfig::toy(1, 0, 1)
        };
        unet_cfg.check_spatial(&[cfg.size])?;
        let backbone = UNet3d::build(&mut params, PRIOR_PREFIX, unet_cfg, &mut rng)?;
        let schedule = DdpmSchedule::new(cfg.ddpm_t, cfg.beta_start, cfg.beta_end)?;
        Ok(Self { params, backbone, control: None, schedule, clamp_output: cfg.clamp_output, backbone_frozen: false, cfg })
    }

    pub fn config(&self) -> &FineConfig {
        &self.cfg
    }

    pub fn backbone_frozen(&self) -> bool {
        self.backbone_frozen
    }

    /// Freezes the prior and attaches a control branch initialized from the
    /// current backbone weights. Load prior weights before calling this.
    pub fn attach_control(&mut self, seed: u64) -> Result<()> {
        if self.control.is_some() {
            return Err(invalid("control branch already attached"));
        }
        let mut rng = SeededRng::new(seed, 0xc0);
        let c = ControlBranch::attach(&mut self.params, CONTROL_PREFIX, &self.backbone, 1, &mut rng)?;
        self.control = Some(c);
        self.freeze_backbone();
        Ok(())
    }

    pub fn freeze_backbone(&mut self) {
        self.params.set_frozen(&format!("{PRIOR_PREFIX}."), true);
        self.backbone_frozen = true;
    }

    /// Prior-only parameters, for writing the prior checkpoint.
    pub fn prior_entries(&self) -> Vec<(String, Tensor)> {
        self.params
            .entries()
            .into_iter()
            .filter(|(n, _)| n.starts_with(&format!("{PRIOR_PREFIX}.")))
            .collect()
    }

    fn check_volume(&self, v: &Volume, what: &str) -> Result<()> {
        if v.dims() != [self.cfg.size; 3] {
            return Err(shape(format!("{what} is {:?}, model expects {}³", v.dims(), self.cfg.size)));
        }
        Ok(())
    }

    /// `ε̂` for a batch of states `[N, 1, n, n, n]`; `cond` engages the control
    /// branch when one is attached.
    pub fn predict_noise(&self, y: &[f64], t: usize, cond: Option<&[f64]>) -> Result<Vec<f64>> {
        let n = self.cfg.size;
        let s = vec![1, 1, n, n, n];
        let mut tape = Tape::new(&self.params);
        let x = tape.input(Tensor::new(s.clone(), y.to_vec())?);
        let ctl = match (cond, &self.control) {
            (Some(c), Some(branch)) => Some((branch, tape.input(Tensor::new(s, c.to_vec())?))),
            (Some(_), None) => return Err(invalid("conditioning requested but no control branch is attached")),
            (None, _) => None,
        };
        let out = self.backbone.forward_controlled(&mut tape, x, None, &[t as f64], ctl)?;
        Ok(tape.value(out).to_vec())
    }
}

/// `y_t = √ᾱ_t·y_0 + √(1−ᾱ_t)·ε` with caller-supplied noise.
pub fn ddpm_forward_with_noise(y0: &Volume, t: usize, sched: &DdpmSchedule, eps: &Volume) -> Result<Volume> {
    y0.same_dims(eps)?;
    if t == 0 || t > sched.t_max() {
        return Err(invalid(format!("t = {t} is outside 1..={}", sched.t_max())));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = y0.data().iter().zip(eps.data()).map(|(y, e)| a * y + b * e).collect();
    // Noisy states leave [-1, 1]; tagged as an unconstrained field.
    Volume::from_data(y0.dims(), y0.spacing(), data, DomainTag::Hu)
}

pub fn ddpm_forward(y0: &Volume, t: usize, sched: &DdpmSchedule, rng: &mut SeededRng) -> Result<(Volume, Volume)> {
    let mut eps = Volume::new(y0.dims(), y0.spacing(), 0.0)?;
    rng.fill_normal(eps.data_mut());
    let yt = ddpm_forward_with_noise(y0, t, sched, &eps)?;
    Ok((yt, eps))
}

/// Noise-prediction loss over a batch. With `conds`, the control branch is
/// engaged; otherwise the prior alone is evaluated.
fn noise_loss(
    m: &FineModel,
    y0s: &[&Volume],
    conds: Option<&[&Volume]>,
    ts: &[usize],
    rng: &mut SeededRng,
) -> Result<(f64, Grads)> {
    if y0s.is_empty() || y0s.len() != ts.len() {
        return Err(invalid("batch and timestep lists must be non-empty and equal in length"));
    }
    for y in y0s {
        m.check_volume(y, "y0")?;
        if y.domain() != DomainTag::NormalizedPm1 {
            return Err(Error::Domain("fine stage needs [-1, 1] normalized volumes".into()));
        }
    }
    let n = m.cfg.size;
    let vox = n * n * n;
    let b = y0s.len();
    let s = vec![b, 1, n, n, n];
    let mut eps = vec![0.0; b * vox];
    rng.fill_normal(&mut eps);
    let mut yt = Vec::with_capacity(b * vox);
    for (i, (y, &t)) in y0s.iter().zip(ts).enumerate() {
        if t == 0 || t > m.schedule.t_max() {
            return Err(invalid(format!("t = {t} is outside 1..={}", m.schedule.t_max())));
        }
        let ab = m.schedule.alpha_bar(t);
        let (ka, kb) = (ab.sqrt(), (1.0 - ab).sqrt());
        yt.extend(y.data().iter().zip(&eps[i * vox..(i + 1) * vox]).map(|(y, e)| ka * y + kb * e));
    }
    let mut tape = Tape::new(&m.params);
    let x = tape.input(Tensor::new(s.clone(), yt)?);
    let target = tape.input(Tensor::new(s.clone(), eps)?);
    let ctl = match conds {
        Some(cs) => {
            let branch = m.control.as_ref().ok_or_else(|| invalid("no control branch is attached"))?;
            if cs.len() != b {
                return Err(invalid("one condition volume per sample is required"));
            }
            let mut data = Vec::with_capacity(b * vox);
            for c in cs {
                m.check_volume(c, "condition")?;
                data.extend_from_slice(c.data());
            }
            Some((branch, tape.input(Tensor::new(s, data)?)))
        }
        None => None,
    };
    let tf: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
    let pred = m.backbone.forward_controlled(&mut tape, x, None, &tf, ctl)?;
    let loss = tape.mse(pred, target)?;
    let value = tape.value(loss)[0];
    Ok((value, tape.backward(loss)?.into_params()))
}

/// Unconditional prior loss `‖ε − ε_θ(y_t, t)‖²` at fixed timesteps.
pub fn prior_loss(m: &FineModel, y0s: &[&Volume], ts: &[usize], rng: &mut SeededRng) -> Result<(f64, Grads)> {
    if m.backbone_frozen {
        return Err(invalid("prior training requires an unfrozen backbone"));
    }
    noise_loss(m, y0s, None, ts, rng)
}

/// One Adam step on the prior with timesteps drawn uniformly from `1..=T`.
pub fn prior_train_step(m: &mut FineModel, opt: &mut AdamState, batch: &[&Volume], rng: &mut SeededRng) -> Result<f64> {
    let ts: Vec<usize> = batch.iter().map(|_| rng.int_range(1, m.schedule.t_max())).collect();
    let (loss, grads) = prior_loss(m, batch, &ts, rng)?;
    adam_step(&mut m.params, opt, &grads)?;
    Ok(loss)
}

/// Trains the prior for `epochs` passes over `dataset` in minibatches of
/// `batch`, shuffled per epoch. Returns the mean loss of each epoch.
pub fn train_prior(
    m: &mut FineModel,
    dataset: &[Volume],
    opt: &mut AdamState,
    epochs: usize,
    batch: usize,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    if m.backbone_frozen {
        return Err(invalid("prior training requires an unfrozen backbone"));
    }
    if dataset.is_empty() {
        return Err(invalid("prior training needs at least one volume"));
    }
    let batch = batch.max(1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        rng.shuffle(&mut order);
        let (mut sum, mut count) = (0.0, 0);
        for chunk in order.chunks(batch) {
            let vols: Vec<&Volume> = chunk.iter().map(|&i| &dataset[i]).collect();
            sum += prior_train_step(m, opt, &vols, rng)?;
            count += 1;
        }
        history.push(sum / count as f64);
    }
    Ok(history)
}

/// Conditional loss `‖ε − ε_θ(y_t, t, X̂)‖²`; only control-branch parameters
/// receive gradients.
pub fn fine_loss(m: &FineModel, y0: &Volume, cond: &Volume, t: usize, rng: &mut SeededRng) -> Result<(f64, Grads)> {
    fine_loss_batch(m, &[y0], &[cond], &[t], rng)
}

pub fn fine_loss_batch(
    m: &FineModel,
    y0s: &[&Volume],
    conds: &[&Volume],
    ts: &[usize],
    rng: &mut SeededRng,
) -> Result<(f64, Grads)> {
    if !m.backbone_frozen {
        return Err(invalid("conditional training requires a frozen backbone"));
    }
    noise_loss(m, y0s, Some(conds), ts, rng)
}

pub fn fine_train_step(
    m: &mut FineModel,
    opt: &mut AdamState,
    y0s: &[&Volume],
    conds: &[&Volume],
    rng: &mut SeededRng,
) -> Result<f64> {
    let ts: Vec<usize> = y0s.iter().map(|_| rng.int_range(1, m.schedule.t_max())).collect();
    let (loss, grads) = fine_loss_batch(m, y0s, conds, &ts, rng)?;
    adam_step(&mut m.params, opt, &grads)?;
    Ok(loss)
}

/// DDIM / ancestral reverse process from `y_T` with an arbitrary noise
/// predictor `predict(y_t, t)`.
///
/// `x̂_0 = (y_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`, optionally clamped to [-1, 1] (in which
/// case `ε̂` is recomputed from the clamped estimate), then
/// `y_{t'} = √ᾱ_{t'}·x̂_0 + √(1−ᾱ_{t'}−σ²)·ε̂ + σ·z` with
/// `σ = eta·√((1−ᾱ_{t'})/(1−ᾱ_t))·√(1−ᾱ_t/ᾱ_{t'})`.
pub fn ddim_sample_with<F>(
    y_start: &[f64],
    sched: &DdpmSchedule,
    plan: &DdimPlan,
    clamp: bool,
    rng: &mut SeededRng,
    mut predict: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], usize) -> Result<Vec<f64>>,
{
    if plan.last() > sched.t_max() {
        return Err(invalid(format!("plan reaches t = {}, schedule T is {}", plan.last(), sched.t_max())));
    }
    let eta = plan.eta();
    let mut y = y_start.to_vec();
    let mut z = vec![0.0; y.len()];
    for (t, tp) in plan.transitions() {
        let e = predict(&y, t)?;
        if e.len() != y.len() {
            return Err(shape("predictor returned the wrong number of voxels"));
        }
        let (ab, abp) = (sched.alpha_bar(t), sched.alpha_bar(tp));
        let sigma = if eta > 0.0 { eta * ((1.0 - abp) / (1.0 - ab) * (1.0 - ab / abp)).max(0.0).sqrt() } else { 0.0 };
        let dir = (1.0 - abp - sigma * sigma).max(0.0).sqrt();
        if sigma > 0.0 {
            rng.fill_normal(&mut z);
        }
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        for i in 0..y.len() {
            let mut eps = e[i];
            let mut x0 = (y[i] - sb * eps) / sa;
            if clamp && !(-1.0..=1.0).contains(&x0) {
                x0 = x0.clamp(-1.0, 1.0);
                eps = (y[i] - sa * x0) / sb;
            }
            let mut next = abp.sqrt() * x0 + dir * eps;
            if sigma > 0.0 {
                next += sigma * z[i];
            }
            y[i] = next;
        }
    }
    Ok(y)
}

/// `Ŷ`: reverse diffusion from `y_T ~ N(0, I)`, guided by `cond` through the
/// control branch when one is attached.
pub fn fine_sample(m: &FineModel, cond: Option<&Volume>, plan: &DdimPlan, rng: &mut SeededRng) -> Result<Volume> {
    if let Some(c) = cond {
        m.check_volume(c, "condition")?;
    }
    let n = m.cfg.size;
    let mut y = vec![0.0; n * n * n];
    rng.fill_normal(&mut y);
    let c = cond.map(|c| c.data().to_vec());
    let out = ddim_sample_with(&y, &m.schedule, plan, m.clamp_output, rng, |y, t| {
        m.predict_noise(y, t, c.as_deref())
    })?;
    Volume::from_data([n; 3], m.cfg.spacing, out, DomainTag::Hu)
}
