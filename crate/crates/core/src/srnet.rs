//! Super-resolution stage: slice-wise 2D residual-dense upscaling of each
//! depth slice, then a 3D transposed convolution that expands depth.
//!
//! Volumes map to tensors as `[1, 1, Z, Y, X]`; z is the slicing (depth) axis.

use crate::error::{invalid, shape, Error, Result};
use crate::nnet::{adam_step, AdamState, Conv, Grads, ParamStore, Tape, Tensor, Var};
use crate::voxcore::{DomainTag, SeededRng, Volume};

const LEAK: f64 = 0.2;
const RES_SCALE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SrConfig {
    pub gamma: usize,
    pub n_rrdb: usize,
    pub base_features: usize,
}

impl SrConfig {
    pub fn toy() -> Self {
        Self { gamma: 2, n_rrdb: 2, base_features: 8 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma != 2 {
            return Err(invalid(format!("only a scale ratio of 2 is supported, got {}", self.gamma)));
        }
        if self.n_rrdb == 0 || self.base_features == 0 {
            return Err(invalid("n_rrdb and base_features must be positive"));
        }
        Ok(())
    }
}

/// Three densely connected convolutions with a scaled residual.
#[derive(Clone, Debug)]
struct Rrdb {
    c1: Conv,
    c2: Conv,
    c3: Conv,
}

impl Rrdb {
    fn new(store: &mut ParamStore, name: &str, f: usize, rng: &mut SeededRng) -> Result<Self> {
        let g = (f / 2).max(4);
        Ok(Self {
            c1: Conv::conv2d(store, &format!("{name}.c1"), f, g, 3, 1, 1, rng)?,
            c2: Conv::conv2d(store, &format!("{name}.c2"), f + g, g, 3, 1, 1, rng)?,
            c3: Conv::conv2d(store, &format!("{name}.c3"), f + 2 * g, f, 3, 1, 1, rng)?,
        })
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let a1 = self.c1.forward(tape, x)?;
        let a1 = tape.leaky_relu(a1, LEAK);
        let h = tape.concat_channels(x, a1)?;
        let a2 = self.c2.forward(tape, h)?;
        let a2 = tape.leaky_relu(a2, LEAK);
        let h = tape.concat_channels(h, a2)?;
        let a3 = self.c3.forward(tape, h)?;
        let a3 = tape.scale(a3, RES_SCALE);
        tape.add(x, a3)
    }
}

pub struct SrModel {
    pub params: ParamStore,
    cfg: SrConfig,
    feat: Conv,
    blocks: Vec<Rrdb>,
    trunk: Conv,
    up: Conv,
    out: Conv,
    head: Conv,
}

impl SrModel {
    pub fn new(cfg: SrConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::new(seed, 0x5e);
        let mut p = ParamStore::new();
        let (f, g) = (cfg.base_features, cfg.gamma);
        let feat = Conv::conv2d(&mut p, "slice.feat", 1, f, 3, 1, 1, &mut rng)?;
        let blocks = (0..cfg.n_rrdb)
            .map(|i| Rrdb::new(&mut p, &format!("slice.rrdb{i}"), f, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let trunk = Conv::conv2d(&mut p, "slice.trunk", f, f, 3, 1, 1, &mut rng)?;
        let up = Conv::conv_t2d(&mut p, "slice.up", f, f, g, g, 0, &mut rng)?;
        let out = Conv::conv2d(&mut p, "slice.out", f, 1, 3, 1, 1, &mut rng)?;
        // Depth: out = (d − 1)·γ − 2·(γ/2) + γ + 2·(γ/2) = γ·d. In-plane: size kept.
        let kd = g + 2 * (g / 2);
        let head = Conv::conv_t3d(&mut p, "volume.head", 1, 1, [kd, 3, 3], [g, 1, 1], [g / 2, 1, 1], &mut rng)?;
        Ok(Self { params: p, cfg, feat, blocks, trunk, up, out, head })
    }

    pub fn config(&self) -> &SrConfig {
        &self.cfg
    }

    /// Depth slices `[Z, 1, Y, X]` → upscaled slices `[Z, 1, γY, γX]`.
    pub fn slice_forward(&self, tape: &mut Tape, slices: Var) -> Result<Var> {
        let f0 = self.feat.forward(tape, slices)?;
        let mut h = f0;
        for b in &self.blocks {
            h = b.forward(tape, h)?;
        }
        let t = self.trunk.forward(tape, h)?;
        let h = tape.add(f0, t)?;
        let h = self.up.forward(tape, h)?;
        let h = tape.leaky_relu(h, LEAK);
        self.out.forward(tape, h)
    }

    /// Upscaled slices `[Z, 1, Y', X']` → volume `[1, 1, γZ, Y', X']`.
    pub fn head_forward(&self, tape: &mut Tape, slices: Var) -> Result<Var> {
        let s = tape.shape(slices).to_vec();
        let stack = tape.reshape(slices, &[1, 1, s[0], s[2], s[3]])?;
        self.head.forward(tape, stack)
    }

    /// `[1, 1, Z, Y, X]` → `[1, 1, γZ, γY, γX]` on a tape.
    pub fn forward_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 5 || s[0] != 1 || s[1] != 1 {
            return Err(shape(format!("SR expects [1, 1, Z, Y, X], got {s:?}")));
        }
        let slices = tape.reshape(x, &[s[2], 1, s[3], s[4]])?;
        let up = self.slice_forward(tape, slices)?;
        self.head_forward(tape, up)
    }

    fn check_input(&self, v: &Volume) -> Result<()> {
        if v.dims().contains(&0) {
            return Err(shape("SR input has an empty axis"));
        }
        if v.domain() != DomainTag::NormalizedPm1 {
            return Err(Error::Domain("SR input must be normalized to [-1, 1]".into()));
        }
        v.check_domain()
    }

    /// Output spacing is the input spacing divided by γ, so the physical
    /// extent is unchanged.
    pub fn forward(&self, v: &Volume) -> Result<Volume> {
        self.check_input(v)?;
        let mut tape = Tape::new(&self.params);
        let x = tape.input(Tensor::from_volume(v));
        let y = self.forward_tape(&mut tape, x)?;
        let g = self.cfg.gamma as f64;
        let sp = v.spacing().map(|s| s / g);
        tape.tensor(y).to_volume(sp, DomainTag::Hu)
    }
}

pub fn sr_forward(m: &SrModel, v: &Volume) -> Result<Volume> {
    m.forward(v)
}

/// One training example. `synthetic` holds the coarse-to-fine output for the
/// same subject, used instead of `downsampled` when synthetic inputs are on.
#[derive(Clone, Debug)]
pub struct SrPair {
    pub high: Volume,
    pub downsampled: Volume,
    pub synthetic: Option<Volume>,
}

impl SrPair {
    pub fn input(&self, use_synthetic: bool) -> Result<&Volume> {
        if use_synthetic {
            self.synthetic
                .as_ref()
                .ok_or_else(|| invalid("synthetic inputs requested but a pair has none"))
        } else {
            Ok(&self.downsampled)
        }
    }
}

/// Mean absolute error between the SR output and `high`, with gradients.
pub fn sr_loss(m: &SrModel, low: &Volume, high: &Volume) -> Result<(f64, Grads)> {
    let g = m.cfg.gamma;
    if high.dims() != low.dims().map(|n| n * g) {
        return Err(shape(format!("high-res dims {:?} are not {g}× low-res dims {:?}", high.dims(), low.dims())));
    }
    m.check_input(low)?;
    let mut tape = Tape::new(&m.params);
    let x = tape.input(Tensor::from_volume(low));
    let y = m.forward_tape(&mut tape, x)?;
    let t = tape.input(Tensor::from_volume(high));
    let loss = tape.l1(y, t)?;
    let value = tape.value(loss)[0];
    Ok((value, tape.backward(loss)?.into_params()))
}

/// L1 training over `pairs`, one pair per step, shuffled each epoch. Returns
/// the per-step loss trace.
pub fn train_sr(
    m: &mut SrModel,
    pairs: &[SrPair],
    opt: &mut AdamState,
    epochs: usize,
    use_synthetic_inputs: bool,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(invalid("SR training needs at least one pair"));
    }
    for p in pairs {
        let low = p.input(use_synthetic_inputs)?;
        if p.high.dims() != low.dims().map(|n| n * m.cfg.gamma) {
            return Err(shape(format!("pair dims {:?} / {:?} do not match γ = {}", low.dims(), p.high.dims(), m.cfg.gamma)));
        }
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut trace = Vec::with_capacity(epochs * pairs.len());
    for _ in 0..epochs {
        rng.shuffle(&mut order);
        for &i in &order {
            let p = &pairs[i];
            let (loss, grads) = sr_loss(m, p.input(use_synthetic_inputs)?, &p.high)?;
            adam_step(&mut m.params, opt, &grads)?;
            trace.push(loss);
        }
    }
    Ok(trace)
}
