//! 2D→3D bridge stage.
//!
//! A shared strided 2D encoder lifts each radiograph to a feature map whose
//! channel axis is reinterpreted as depth, giving `F(x)`. With two views a
//! fusion block merges the lifted volumes. A Brownian bridge then links the
//! CT volume `x_0` to `x_T = F(x)`:
//!
//! `x_t = (1 − α_t)·x_0 + α_t·x_T + √δ_t·ε`,
//!
//! and the U-Net learns the residual `x_t − x_0` from `(x_t, t, F(x))`.

use crate::error::{invalid, shape, Error, Result};
use crate::nnet::{adam_step, AdamState, Conv, Grads, GroupNorm, ParamStore, Tape, Tensor, UNet3d, UNetConfig, Var};
use crate::schedules::{BridgeSchedule, DdimPlan};
use crate::voxcore::{DomainTag, Projection, SeededRng, ViewTag, Volume};

#[derive(Clone, Debug, PartialEq)]
pub struct CoarseConfig {
    /// Side of the square input projection, `rh = rw`.
    pub proj_size: usize,
    /// Downsampling factor of the encoder; a power of two.
    pub r: usize,
    pub bi_planar: bool,
    pub enc_channels: usize,
    pub unet_base: usize,
    pub unet_mults: Vec<usize>,
    pub bridge_t: usize,
    pub s_max: f64,
    /// Physical voxel spacing attached to generated volumes.
    pub spacing: [f64; 3],
}

impl CoarseConfig {
    /// Edge of the cubic output volume: `h = w = d = rh / r`.
    pub fn volume_size(&self) -> usize {
        self.proj_size / self.r
    }

    fn validate(&self) -> Result<()> {
        if self.r == 0 || !self.r.is_power_of_two() {
            return Err(invalid(format!("r must be a power of two, got {}", self.r)));
        }
        if self.proj_size == 0 || self.proj_size % self.r != 0 {
            return Err(invalid(format!("projection size {} is not divisible by r = {}", self.proj_size, self.r)));
        }
        Ok(())
    }
}

/// Strided 2D convolutions `rh → rh/r`, then a 3×3 head producing `f = d`
/// channels that become the depth axis.
#[derive(Clone, Debug)]
pub struct EncoderLift {
    downs: Vec<Conv>,
    head: Conv,
    depth: usize,
    proj_size: usize,
}

impl EncoderLift {
    pub fn new(store: &mut ParamStore, cfg: &CoarseConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let steps = cfg.r.trailing_zeros() as usize;
        let mut downs = Vec::with_capacity(steps);
        let mut ch = 1;
        for i in 0..steps {
            let co = cfg.enc_channels << i.min(2);
            downs.push(Conv::conv2d(store, &format!("encoder.down{i}"), ch, co, 3, 2, 1, rng)?);
            ch = co;
        }
        let depth = cfg.volume_size();
        let head = Conv::conv2d(store, "encoder.head", ch, depth, 3, 1, 1, rng)?;
        Ok(Self { downs, head, depth, proj_size: cfg.proj_size })
    }

    /// `[N, 1, rh, rw]` projections → `[N, 1, Z, Y, X]` volumes. The depth axis
    /// runs along the view's beam direction: y for PA, x for lateral.
    pub fn forward(&self, tape: &mut Tape, x: Var, view: ViewTag) -> Result<Var> {
        let xs = tape.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != 1 || xs[2] != self.proj_size || xs[3] != self.proj_size {
            return Err(shape(format!(
                "encoder expects [N, 1, {0}, {0}], got {xs:?}",
                self.proj_size
            )));
        }
        let mut h = x;
        for c in &self.downs {
            h = c.forward(tape, h)?;
            h = tape.silu(h);
        }
        h = self.head.forward(tape, h)?;
        let s = tape.shape(h).to_vec();
        // [N, f, rows = z, cols] → [N, 1, f, z, cols]
        let h = tape.reshape(h, &[s[0], 1, s[1], s[2], s[3]])?;
        match view {
            // cols = x, depth = y
            ViewTag::Pa => tape.permute(h, &[0, 1, 3, 2, 4]),
            // cols = y, depth = x
            ViewTag::Lateral => tape.permute(h, &[0, 1, 3, 4, 2]),
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }
}

/// Three conv3³ → GN → ReLU layers on the two stacked views, plus a 1×1×1
/// residual projection from two channels to one.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    convs: Vec<(Conv, GroupNorm)>,
    residual: Conv,
}

impl FusionBlock {
    pub fn new(store: &mut ParamStore, width: usize, rng: &mut SeededRng) -> Result<Self> {
        let groups = if width % 4 == 0 { 4 } else { 1 };
        let plan = [(2, width, groups), (width, width, groups), (width, 1, 1)];
        let mut convs = Vec::with_capacity(3);
        for (i, (ci, co, g)) in plan.into_iter().enumerate() {
            let c = Conv::conv3d(store, &format!("fusion.conv{i}"), ci, co, 3, 1, 1, rng)?;
            let n = GroupNorm::new(store, &format!("fusion.norm{i}"), co, g)?;
            convs.push((c, n));
        }
        let residual = Conv::conv3d(store, "fusion.residual", 2, 1, 1, 1, 0, rng)?;
        Ok(Self { convs, residual })
    }

    /// `[N, 2, Z, Y, X]` → `[N, 1, Z, Y, X]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if tape.shape(x).get(1) != Some(&2) {
            return Err(shape("fusion block expects two input channels"));
        }
        let mut h = x;
        for (c, n) in &self.convs {
            h = c.forward(tape, h)?;
            h = n.forward(tape, h)?;
            h = tape.relu(h);
        }
        let r = self.residual.forward(tape, x)?;
        tape.add(h, r)
    }

    /// Zeroes every main-branch weight, leaving only the residual projection.
    pub fn zero_main_branch(&self, store: &mut ParamStore) {
        for (c, _) in &self.convs {
            c.zero(store);
        }
    }
}

/// Views for one sample: PA alone, or PA with a lateral view.
#[derive(Clone, Debug, PartialEq)]
pub struct Views {
    pub pa: Projection,
    pub lateral: Option<Projection>,
}

impl Views {
    pub fn single(pa: Projection) -> Self {
        Self { pa, lateral: None }
    }

    pub fn bi_planar(pa: Projection, lateral: Projection) -> Self {
        Self { pa, lateral: Some(lateral) }
    }

    /// Accepts `[PA]` or `[PA, LATERAL]` in that order.
    pub fn from_slice(views: &[Projection]) -> Result<Self> {
        match views {
            [p] if p.view() == ViewTag::Pa => Ok(Self::single(p.clone())),
            [p, l] if p.view() == ViewTag::Pa && l.view() == ViewTag::Lateral => {
                Ok(Self::bi_planar(p.clone(), l.clone()))
            }
            _ => Err(invalid("expected one PA view, or a PA and a LATERAL view")),
        }
    }
}

pub struct CoarseModel {
    pub params: ParamStore,
    pub encoder: EncoderLift,
    pub fusion: Option<FusionBlock>,
    pub backbone: UNet3d,
    pub schedule: BridgeSchedule,
    cfg: CoarseConfig,
}

impl CoarseModel {
    pub fn new(cfg: CoarseConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::new(seed, 0x0c0a);
        let mut params = ParamStore::new();
        let encoder = EncoderLift::new(&mut params, &cfg, &mut rng)?;
        let fusion = if cfg.bi_planar { Some(FusionBlock::new(&mut params, 8, &mut rng)?) } else { None };
        let unet_cfg = UNetConfig {
            base_channels: cfg.unet_base,
            channel_mults: cfg.unet_mults.clone(),
            ..UNetConfig::toy(1, 1, 1)
        };
        unet_cfg.check_spatial(&[cfg.volume_size()])?;
        let backbone = UNet3d::build(&mut params, "backbone", unet_cfg, &mut rng)?;
        let schedule = BridgeSchedule::new(cfg.bridge_t, cfg.s_max)?;
        Ok(Self { params, encoder, fusion, backbone, schedule, cfg })
    }

    pub fn config(&self) -> &CoarseConfig {
        &self.cfg
    }

    fn check_views(&self, views: &Views) -> Result<()> {
        if views.pa.view() != ViewTag::Pa {
            return Err(invalid("first view must be PA"));
        }
        match (&views.lateral, self.fusion.is_some()) {
            (Some(l), true) if l.view() == ViewTag::Lateral => {}
            (None, false) => {}
            (Some(_), true) => return Err(invalid("second view must be LATERAL")),
            (Some(_), false) => return Err(invalid("single-planar model got two views")),
            (None, true) => return Err(invalid("bi-planar model needs a lateral view")),
        }
        for p in std::iter::once(&views.pa).chain(views.lateral.as_ref()) {
            if p.dims() != [self.cfg.proj_size; 2] {
                return Err(shape(format!(
                    "projection is {:?}, model expects {1}x{1}",
                    p.dims(),
                    self.cfg.proj_size
                )));
            }
        }
        Ok(())
    }

    fn stack(views: &[&Projection]) -> Result<Tensor> {
        let [u, v] = views[0].dims();
        let mut data = Vec::with_capacity(views.len() * u * v);
        for p in views {
            data.extend_from_slice(p.data());
        }
        Tensor::new(vec![views.len(), 1, v, u], data)
    }

    /// `F(x)` for a batch, as `[N, 1, Z, Y, X]`.
    pub fn encode_on_tape(&self, tape: &mut Tape, batch: &[&Views]) -> Result<Var> {
        for v in batch {
            self.check_views(v)?;
        }
        let pa: Vec<&Projection> = batch.iter().map(|v| &v.pa).collect();
        let pa = tape.input(Self::stack(&pa)?);
        let f_pa = self.encoder.forward(tape, pa, ViewTag::Pa)?;
        match &self.fusion {
            None => Ok(f_pa),
            Some(fusion) => {
                let lat: Vec<&Projection> = batch.iter().map(|v| v.lateral.as_ref().unwrap()).collect();
                let lat = tape.input(Self::stack(&lat)?);
                let f_lat = self.encoder.forward(tape, lat, ViewTag::Lateral)?;
                let both = tape.concat_channels(f_pa, f_lat)?;
                fusion.forward(tape, both)
            }
        }
    }

    /// `F(x)` as a volume.
    pub fn encode_condition(&self, views: &Views) -> Result<Volume> {
        let mut tape = Tape::new(&self.params);
        let f = self.encode_on_tape(&mut tape, &[views])?;
        tape.tensor(f).to_volume(self.cfg.spacing, DomainTag::Hu)
    }

    /// Residual prediction `f_θ(x_t, t, F(x))` for a single sample.
    pub fn predict_residual(&self, x_t: &[f64], t: usize, cond: &[f64]) -> Result<Vec<f64>> {
        let n = self.cfg.volume_size();
        let shape5 = vec![1, 1, n, n, n];
        let mut tape = Tape::new(&self.params);
        let x = tape.input(Tensor::new(shape5.clone(), x_t.to_vec())?);
        let c = tape.input(Tensor::new(shape5, cond.to_vec())?);
        let y = self.backbone.forward(&mut tape, x, Some(c), &[t as f64])?;
        Ok(tape.value(y).to_vec())
    }
}

fn bridge_mix(x0: &[f64], xt: &[f64], eps: &[f64], t: usize, s: &BridgeSchedule) -> Vec<f64> {
    let (a, sd) = (s.alpha(t), s.delta(t).sqrt());
    x0.iter()
        .zip(xt)
        .zip(eps)
        .map(|((&x0, &xt), &e)| (1.0 - a) * x0 + a * xt + sd * e)
        .collect()
}

/// Draws `ε` and returns `(x_t, ε)`.
pub fn bridge_forward(
    x0: &Volume,
    x_t_end: &Volume,
    t: usize,
    sched: &BridgeSchedule,
    rng: &mut SeededRng,
) -> Result<(Volume, Volume)> {
    x0.same_dims(x_t_end)?;
    if t > sched.t_max() {
        return Err(invalid(format!("t = {t} exceeds T = {}", sched.t_max())));
    }
    let mut eps = Volume::new(x0.dims(), x0.spacing(), 0.0)?;
    rng.fill_normal(eps.data_mut());
    let xt = bridge_forward_with_noise(x0, x_t_end, t, sched, &eps)?;
    Ok((xt, eps))
}

/// [`bridge_forward`] with caller-supplied noise.
pub fn bridge_forward_with_noise(
    x0: &Volume,
    x_t_end: &Volume,
    t: usize,
    sched: &BridgeSchedule,
    eps: &Volume,
) -> Result<Volume> {
    x0.same_dims(x_t_end)?;
    x0.same_dims(eps)?;
    if t > sched.t_max() {
        return Err(invalid(format!("t = {t} exceeds T = {}", sched.t_max())));
    }
    let data = bridge_mix(x0.data(), x_t_end.data(), eps.data(), t, sched);
    Volume::from_data(x0.dims(), x0.spacing(), data, DomainTag::Hu)
}

/// One training sample for the bridge loss.
pub struct CoarseSample<'a> {
    pub x0: &'a Volume,
    pub views: &'a Views,
}

/// Bridge objective averaged over a batch, with joint gradients for encoder,
/// fusion block and backbone.
///
/// The target is `x_t − x_0 = α_t·(F(x) − x_0) + √δ_t·ε`, so it depends on the
/// encoder as well as the prediction does.
pub fn coarse_loss_batch(
    m: &CoarseModel,
    batch: &[CoarseSample],
    ts: &[usize],
    rng: &mut SeededRng,
) -> Result<(f64, Grads)> {
    if batch.is_empty() || batch.len() != ts.len() {
        return Err(invalid("batch and timestep lists must be non-empty and equal in length"));
    }
    let n = m.cfg.volume_size();
    for s in batch {
        if s.x0.dims() != [n; 3] {
            return Err(shape(format!("x0 is {:?}, model expects {n}³", s.x0.dims())));
        }
        if s.x0.domain() != DomainTag::NormalizedPm1 {
            return Err(Error::Domain("coarse training needs [-1, 1] normalized volumes".into()));
        }
    }
    if let Some(&t) = ts.iter().find(|&&t| t > m.schedule.t_max()) {
        return Err(invalid(format!("t = {t} exceeds T = {}", m.schedule.t_max())));
    }
    let b = batch.len();
    let vox = n * n * n;
    let shape5 = vec![b, 1, n, n, n];
    let mut x0 = Vec::with_capacity(b * vox);
    let mut eps = vec![0.0; b * vox];
    let mut coef = Vec::with_capacity(3 * b);
    for (s, &t) in batch.iter().zip(ts) {
        x0.extend_from_slice(s.x0.data());
        coef.push((1.0 - m.schedule.alpha(t), m.schedule.alpha(t), m.schedule.delta(t).sqrt()));
    }
    rng.fill_normal(&mut eps);
    // Per-sample coefficients, broadcast over voxels.
    let per_voxel = |f: fn(&(f64, f64, f64)) -> f64| -> Vec<f64> {
        coef.iter().flat_map(|c| std::iter::repeat(f(c)).take(vox)).collect()
    };
    let (ka, kb, kd) = (per_voxel(|c| c.0), per_voxel(|c| c.1), per_voxel(|c| c.2));

    let mut tape = Tape::new(&m.params);
    let views: Vec<&Views> = batch.iter().map(|s| s.views).collect();
    let f = m.encode_on_tape(&mut tape, &views)?;
    let x0v = tape.input(Tensor::new(shape5.clone(), x0.clone())?);
    let scaled_x0 = tape.input(Tensor::new(shape5.clone(), x0.iter().zip(&ka).map(|(x, k)| x * k).collect())?);
    let noise = tape.input(Tensor::new(shape5.clone(), eps.iter().zip(&kd).map(|(e, k)| e * k).collect())?);
    let kb = tape.input(Tensor::new(shape5, kb)?);
    let af = tape.mul(f, kb)?;
    let xt = tape.add(scaled_x0, af)?;
    let xt = tape.add(xt, noise)?;
    let target = tape.sub(xt, x0v)?;
    let tf: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
    let pred = m.backbone.forward(&mut tape, xt, Some(f), &tf)?;
    let loss = tape.mse(pred, target)?;
    let value = tape.value(loss)[0];
    let grads = tape.backward(loss)?.into_params();
    Ok((value, grads))
}

/// Single-sample bridge loss at a fixed `t`.
pub fn coarse_loss(
    m: &CoarseModel,
    x0: &Volume,
    views: &Views,
    t: usize,
    rng: &mut SeededRng,
) -> Result<(f64, Grads)> {
    coarse_loss_batch(m, &[CoarseSample { x0, views }], &[t], rng)
}

/// Draws a batch of timesteps uniformly from `1..=T`, runs the loss and applies
/// one Adam step. Returns the batch loss.
pub fn coarse_train_step(
    m: &mut CoarseModel,
    opt: &mut AdamState,
    batch: &[CoarseSample],
    rng: &mut SeededRng,
) -> Result<f64> {
    let ts: Vec<usize> = batch.iter().map(|_| rng.int_range(1, m.schedule.t_max())).collect();
    let (loss, grads) = coarse_loss_batch(m, batch, &ts, rng)?;
    adam_step(&mut m.params, opt, &grads)?;
    Ok(loss)
}

/// Reverse bridge from `x_T` down to `t = 0` with an arbitrary residual
/// predictor `predict(x_t, t)`.
///
/// Each step forms `x̂_0 = x_t − r̂` and moves to
/// `x_{t'} = (1 − α_{t'})·x̂_0 + α_{t'}·x_T + c·(x_t − (1 − α_t)·x̂_0 − α_t·x_T)`
/// with `c = √(δ_{t'}/δ_t)` (0 when `δ_t = 0`). For `eta > 0`, `c` is scaled by
/// `√(1 − eta)` and `√(eta·δ_{t'})·ε` is added.
pub fn bridge_sample_with<F>(
    x_t_end: &[f64],
    sched: &BridgeSchedule,
    plan: &DdimPlan,
    rng: &mut SeededRng,
    mut predict: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], usize) -> Result<Vec<f64>>,
{
    if plan.last() != sched.t_max() {
        return Err(invalid(format!("plan ends at {}, schedule T is {}", plan.last(), sched.t_max())));
    }
    let eta = plan.eta();
    let mut x = x_t_end.to_vec();
    let mut noise = vec![0.0; x.len()];
    for (t, tp) in plan.transitions() {
        let r = predict(&x, t)?;
        if r.len() != x.len() {
            return Err(shape("predictor returned the wrong number of voxels"));
        }
        let (a, d) = (sched.alpha(t), sched.delta(t));
        let (ap, dp) = (sched.alpha(tp), sched.delta(tp));
        let mut c = if d > 0.0 { (dp / d).sqrt() } else { 0.0 };
        if eta > 0.0 {
            c *= (1.0 - eta).sqrt();
            rng.fill_normal(&mut noise);
        }
        let sn = (eta * dp).sqrt();
        for i in 0..x.len() {
            let x0 = x[i] - r[i];
            let dev = x[i] - (1.0 - a) * x0 - a * x_t_end[i];
            let mut next = (1.0 - ap) * x0 + ap * x_t_end[i] + c * dev;
            if eta > 0.0 {
                next += sn * noise[i];
            }
            x[i] = next;
        }
    }
    Ok(x)
}

/// `X̂`: encodes the views and runs the reverse bridge from `F(x)`.
pub fn bridge_sample(m: &CoarseModel, views: &Views, plan: &DdimPlan, rng: &mut SeededRng) -> Result<Volume> {
    let f = m.encode_condition(views)?;
    let cond = f.data().to_vec();
    let out = bridge_sample_with(f.data(), &m.schedule, plan, rng, |x, t| m.predict_residual(x, t, &cond))?;
    Volume::from_data(f.dims(), m.cfg.spacing, out, DomainTag::Hu)
}
