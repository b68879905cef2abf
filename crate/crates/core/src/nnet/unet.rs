//! Compact 3D U-Net and the control branch that conditions a frozen copy.

use super::layers::{time_embedding, Conv, GroupNorm, Linear};
use super::tape::{Tape, Var};
use super::tensor::{ParamStore, Tensor};
use crate::error::{invalid, shape, Result};
use crate::voxcore::SeededRng;

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub in_ch: usize,
    pub cond_ch: usize,
    pub out_ch: usize,
    pub res_blocks: usize,
    pub groups: usize,
}

impl UNetConfig {
    /// Toy defaults: base 8, mults (1, 2, 4), two residual blocks per level,
    /// four normalization groups.
    pub fn toy(in_ch: usize, cond_ch: usize, out_ch: usize) -> Self {
        Self {
            base_channels: 8,
            channel_mults: vec![1, 2, 4],
            in_ch,
            cond_ch,
            out_ch,
            res_blocks: 2,
            groups: 4,
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    pub fn temb_dim(&self) -> usize {
        4 * self.base_channels
    }

    fn validate(&self) -> Result<()> {
        if self.channel_mults.is_empty() {
            return Err(invalid("U-Net needs at least one resolution level"));
        }
        if self.base_channels == 0 || self.in_ch + self.cond_ch == 0 || self.out_ch == 0 || self.res_blocks == 0 {
            return Err(invalid("U-Net channel counts and block count must be positive"));
        }
        for l in 0..self.levels() {
            let c = self.channels(l);
            if c == 0 || self.groups == 0 || c % self.groups != 0 {
                return Err(invalid(format!("level {l}: {c} channels not divisible into {} groups", self.groups)));
            }
        }
        Ok(())
    }

    /// Spatial extents must halve cleanly at every downsampling step.
    pub fn check_spatial(&self, dims: &[usize]) -> Result<()> {
        let f = 1usize << (self.levels() - 1);
        if dims.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(shape(format!("spatial dims {dims:?} must be divisible by {f}")));
        }
        Ok(())
    }
}

/// conv3 → (+ time) → GN → SiLU → conv3 → GN → SiLU, plus a 1×1×1 skip when
/// the channel count changes.
#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv,
    temb: Linear,
    norm1: GroupNorm,
    conv2: Conv,
    norm2: GroupNorm,
    skip: Option<Conv>,
}

impl ResBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        ci: usize,
        co: usize,
        temb_dim: usize,
        groups: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(Self {
            conv1: Conv::conv3d(store, &format!("{name}.conv1"), ci, co, 3, 1, 1, rng)?,
            temb: Linear::new(store, &format!("{name}.temb"), temb_dim, co, rng)?,
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), co, groups)?,
            conv2: Conv::conv3d(store, &format!("{name}.conv2"), co, co, 3, 1, 1, rng)?,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), co, groups)?,
            skip: if ci != co {
                Some(Conv::conv3d(store, &format!("{name}.skip"), ci, co, 1, 1, 0, rng)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, tape: &mut Tape, x: Var, temb: Var) -> Result<Var> {
        let mut h = self.conv1.forward(tape, x)?;
        let e = self.temb.forward(tape, temb)?;
        h = tape.add_channel_bias(h, e)?;
        h = self.norm1.forward(tape, h)?;
        h = tape.silu(h);
        h = self.conv2.forward(tape, h)?;
        h = self.norm2.forward(tape, h)?;
        h = tape.silu(h);
        let s = match &self.skip {
            Some(c) => c.forward(tape, x)?,
            None => x,
        };
        tape.add(h, s)
    }
}

#[derive(Clone, Debug)]
struct TimeMlp {
    dim: usize,
    l1: Linear,
    l2: Linear,
}

impl TimeMlp {
    /// `[N, temb]` activations, already passed through SiLU.
    fn forward(&self, tape: &mut Tape, t: &[f64]) -> Result<Var> {
        let mut data = Vec::with_capacity(t.len() * self.dim);
        for &ti in t {
            data.extend(time_embedding(ti, self.dim)?);
        }
        let e = tape.input(Tensor::new(vec![t.len(), self.dim], data)?);
        let h = self.l1.forward(tape, e)?;
        let h = tape.silu(h);
        let h = self.l2.forward(tape, h)?;
        Ok(tape.silu(h))
    }
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    blocks: Vec<ResBlock>,
    down: Option<Conv>,
}

/// Input convolution, downsampling path and middle block.
#[derive(Clone, Debug)]
pub struct UNetEncoder {
    conv_in: Conv,
    levels: Vec<EncoderLevel>,
    mid: ResBlock,
}

/// Per-level skip tensors (shallowest first) and the middle-block output.
pub struct EncoderFeatures {
    pub skips: Vec<Var>,
    pub mid: Var,
}

impl UNetEncoder {
    fn new(store: &mut ParamStore, name: &str, cfg: &UNetConfig, in_ch: usize, rng: &mut SeededRng) -> Result<Self> {
        let td = cfg.temb_dim();
        let conv_in = Conv::conv3d(store, &format!("{name}.conv_in"), in_ch, cfg.base_channels, 3, 1, 1, rng)?;
        let mut levels = Vec::new();
        let mut ch = cfg.base_channels;
        for l in 0..cfg.levels() {
            let co = cfg.channels(l);
            let mut blocks = Vec::new();
            for b in 0..cfg.res_blocks {
                blocks.push(ResBlock::new(store, &format!("{name}.down{l}.res{b}"), ch, co, td, cfg.groups, rng)?);
                ch = co;
            }
            let down = if l + 1 < cfg.levels() {
                Some(Conv::conv3d(store, &format!("{name}.down{l}.pool"), co, co, 3, 2, 1, rng)?)
            } else {
                None
            };
            levels.push(EncoderLevel { blocks, down });
        }
        let mid = ResBlock::new(store, &format!("{name}.mid"), ch, ch, td, cfg.groups, rng)?;
        Ok(Self { conv_in, levels, mid })
    }

    fn forward(&self, tape: &mut Tape, x: Var, temb: Var) -> Result<EncoderFeatures> {
        let mut h = self.conv_in.forward(tape, x)?;
        let mut skips = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            for b in &level.blocks {
                h = b.forward(tape, h, temb)?;
            }
            skips.push(h);
            if let Some(d) = &level.down {
                h = d.forward(tape, h)?;
            }
        }
        let mid = self.mid.forward(tape, h, temb)?;
        Ok(EncoderFeatures { skips, mid })
    }
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    blocks: Vec<ResBlock>,
    up: Option<Conv>,
}

#[derive(Clone, Debug)]
struct UNetDecoder {
    /// Deepest level first.
    levels: Vec<DecoderLevel>,
    norm_out: GroupNorm,
    conv_out: Conv,
}

impl UNetDecoder {
    fn new(store: &mut ParamStore, name: &str, cfg: &UNetConfig, rng: &mut SeededRng) -> Result<Self> {
        let td = cfg.temb_dim();
        let mut levels = Vec::new();
        let mut ch = cfg.channels(cfg.levels() - 1);
        for l in (0..cfg.levels()).rev() {
            let co = cfg.channels(l);
            let mut blocks = Vec::new();
            for b in 0..cfg.res_blocks {
                let ci = if b == 0 { ch + co } else { co };
                blocks.push(ResBlock::new(store, &format!("{name}.up{l}.res{b}"), ci, co, td, cfg.groups, rng)?);
            }
            ch = co;
            let up = if l > 0 {
                Some(Conv::conv_t3d(store, &format!("{name}.up{l}.unpool"), co, co, [2; 3], [2; 3], [0; 3], rng)?)
            } else {
                None
            };
            levels.push(DecoderLevel { blocks, up });
        }
        let norm_out = GroupNorm::new(store, &format!("{name}.norm_out"), cfg.base_channels, cfg.groups)?;
        let conv_out = Conv::conv3d(store, &format!("{name}.conv_out"), cfg.base_channels, cfg.out_ch, 3, 1, 1, rng)?;
        Ok(Self { levels, norm_out, conv_out })
    }

    fn forward(&self, tape: &mut Tape, f: &EncoderFeatures, temb: Var) -> Result<Var> {
        let mut h = f.mid;
        for (level, skip) in self.levels.iter().zip(f.skips.iter().rev()) {
            h = tape.concat_channels(h, *skip)?;
            for b in &level.blocks {
                h = b.forward(tape, h, temb)?;
            }
            if let Some(u) = &level.up {
                h = u.forward(tape, h)?;
            }
        }
        h = self.norm_out.forward(tape, h)?;
        h = tape.silu(h);
        self.conv_out.forward(tape, h)
    }
}

/// Encoder–decoder with skip concatenation and time conditioning. Condition
/// channels, if any, are concatenated to the state at the input.
#[derive(Clone, Debug)]
pub struct UNet3d {
    cfg: UNetConfig,
    prefix: String,
    temb: TimeMlp,
    enc: UNetEncoder,
    dec: UNetDecoder,
}

/// Additive residuals for a backbone's skips and middle output.
pub struct ControlResiduals {
    pub skips: Vec<Var>,
    pub mid: Var,
}

impl UNet3d {
    pub fn build(store: &mut ParamStore, prefix: &str, cfg: UNetConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let td = cfg.temb_dim();
        let temb = TimeMlp {
            dim: cfg.base_channels,
            l1: Linear::new(store, &format!("{prefix}.temb.l1"), cfg.base_channels, td, rng)?,
            l2: Linear::new(store, &format!("{prefix}.temb.l2"), td, td, rng)?,
        };
        let enc = UNetEncoder::new(store, &format!("{prefix}.enc"), &cfg, cfg.in_ch + cfg.cond_ch, rng)?;
        let dec = UNetDecoder::new(store, &format!("{prefix}.dec"), &cfg, rng)?;
        Ok(Self { cfg, prefix: prefix.to_string(), temb, enc, dec })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn input(&self, tape: &mut Tape, x: Var, cond: Option<Var>, t: &[f64]) -> Result<Var> {
        let xs = tape.shape(x).to_vec();
        if xs.len() != 5 || xs[1] != self.cfg.in_ch {
            return Err(shape(format!("U-Net expects [N, {}, D, H, W], got {xs:?}", self.cfg.in_ch)));
        }
        if t.len() != xs[0] {
            return Err(shape(format!("{} timesteps for batch of {}", t.len(), xs[0])));
        }
        self.cfg.check_spatial(&xs[2..])?;
        match (cond, self.cfg.cond_ch) {
            (None, 0) => Ok(x),
            (Some(c), k) if k > 0 && tape.shape(c).get(1) == Some(&k) => tape.concat_channels(x, c),
            _ => Err(shape(format!("U-Net expects {} condition channels", self.cfg.cond_ch))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, cond: Option<Var>, t: &[f64]) -> Result<Var> {
        self.forward_controlled(tape, x, cond, t, None)
    }

    /// Forward pass with optional additive control residuals on every skip
    /// tensor and on the middle output. The control branch sees the backbone
    /// input concatenated with its own condition tensor.
    pub fn forward_controlled(
        &self,
        tape: &mut Tape,
        x: Var,
        cond: Option<Var>,
        t: &[f64],
        control: Option<(&ControlBranch, Var)>,
    ) -> Result<Var> {
        let input = self.input(tape, x, cond, t)?;
        let temb = self.temb.forward(tape, t)?;
        let mut feats = self.enc.forward(tape, input, temb)?;
        if let Some((c, cond)) = control {
            let r = c.residuals(tape, input, cond, temb)?;
            for (s, d) in feats.skips.iter_mut().zip(r.skips) {
                *s = tape.add(*s, d)?;
            }
            feats.mid = tape.add(feats.mid, r.mid)?;
        }
        self.dec.forward(tape, &feats, temb)
    }
}

/// Trainable encoder copy fed with the backbone input plus a condition volume;
/// its features reach the backbone through zero-initialized 1×1×1
/// projections.
#[derive(Clone, Debug)]
pub struct ControlBranch {
    cond_ch: usize,
    enc: UNetEncoder,
    proj: Vec<Conv>,
    proj_mid: Conv,
}

impl ControlBranch {
    /// Adds the branch under `prefix`, copying the backbone encoder weights.
    /// Input-convolution weights for the extra condition channels start at
    /// zero.
    pub fn attach(
        store: &mut ParamStore,
        prefix: &str,
        backbone: &UNet3d,
        cond_ch: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if cond_ch == 0 {
            return Err(invalid("control branch needs at least one condition channel"));
        }
        let cfg = backbone.config();
        let base_in = cfg.in_ch + cfg.cond_ch;
        let first = store.len();
        let enc = UNetEncoder::new(store, &format!("{prefix}.enc"), cfg, base_in + cond_ch, rng)?;
        let src_prefix = format!("{}.enc", backbone.prefix());
        let dst_prefix = format!("{prefix}.enc");
        let ids: Vec<_> = store.iter().skip(first).map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let src_name = name.replacen(&dst_prefix, &src_prefix, 1);
            let src_id = store
                .id(&src_name)
                .ok_or_else(|| invalid(format!("backbone lacks `{src_name}`")))?;
            let src = store.get(src_id).value.clone();
            let dst = &mut store.get_mut(id).value;
            if src.shape() == dst.shape() {
                *dst = src;
            } else {
                // conv_in: [co, base_in + cond_ch, k, k, k] from [co, base_in, k, k, k]
                let (co, kvol) = (src.shape()[0], src.shape()[2..].iter().product::<usize>());
                let out = dst.data_mut();
                out.iter_mut().for_each(|v| *v = 0.0);
                for o in 0..co {
                    let s = &src.data()[o * base_in * kvol..(o + 1) * base_in * kvol];
                    out[o * (base_in + cond_ch) * kvol..][..base_in * kvol].copy_from_slice(s);
                }
            }
        }
        let mut proj = Vec::new();
        for l in 0..cfg.levels() {
            let c = cfg.channels(l);
            let p = Conv::conv3d(store, &format!("{prefix}.zero{l}"), c, c, 1, 1, 0, rng)?;
            p.zero(store);
            proj.push(p);
        }
        let c = cfg.channels(cfg.levels() - 1);
        let proj_mid = Conv::conv3d(store, &format!("{prefix}.zero_mid"), c, c, 1, 1, 0, rng)?;
        proj_mid.zero(store);
        Ok(Self { cond_ch, enc, proj, proj_mid })
    }

    pub fn cond_channels(&self) -> usize {
        self.cond_ch
    }

    fn residuals(&self, tape: &mut Tape, input: Var, cond: Var, temb: Var) -> Result<ControlResiduals> {
        if tape.shape(cond).get(1) != Some(&self.cond_ch) {
            return Err(shape(format!("control branch expects {} condition channels", self.cond_ch)));
        }
        let x = tape.concat_channels(input, cond)?;
        let f = self.enc.forward(tape, x, temb)?;
        let mut skips = Vec::with_capacity(f.skips.len());
        for (p, s) in self.proj.iter().zip(&f.skips) {
            skips.push(p.forward(tape, *s)?);
        }
        let mid = self.proj_mid.forward(tape, f.mid)?;
        Ok(ControlResiduals { skips, mid })
    }
}
