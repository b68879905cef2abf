//! Parameterized building blocks over [`Tape`] operations.

use super::tape::{Tape, Var};
use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::{invalid, Result};
use crate::voxcore::SeededRng;

/// Sinusoidal embedding `[sin(t·ω_0), cos(t·ω_0), sin(t·ω_1), …]` with `ω_i`
/// geometric from 1 down to 1/10000.
pub fn time_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim < 2 || dim % 2 != 0 {
        return Err(invalid(format!("time embedding dim must be even and >= 2, got {dim}")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let w = if half == 1 { 1.0 } else { 10000f64.powf(-(i as f64) / (half - 1) as f64) };
        out.push((t * w).sin());
        out.push((t * w).cos());
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ConvKind {
    Conv2,
    Conv3,
    ConvT2,
    ConvT3,
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    kind: ConvKind,
    stride: [usize; 3],
    pad: [usize; 3],
}

fn init_weight(shape: &[usize], fan_in: usize, rng: &mut SeededRng) -> Tensor {
    Tensor::randn(shape, (1.0 / fan_in.max(1) as f64).sqrt(), rng)
}

impl Conv {
    /// 3D convolution `ci → co` with a cubic kernel of side `k`.
    pub fn conv3d(
        store: &mut ParamStore,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Self::build(store, name, ConvKind::Conv3, ci, co, [k; 3], [stride; 3], [pad; 3], rng)
    }

    pub fn conv2d(
        store: &mut ParamStore,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Self::build(store, name, ConvKind::Conv2, ci, co, [1, k, k], [1, stride, stride], [0, pad, pad], rng)
    }

    pub fn conv_t3d(
        store: &mut ParamStore,
        name: &str,
        ci: usize,
        co: usize,
        k: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Self::build(store, name, ConvKind::ConvT3, ci, co, k, stride, pad, rng)
    }

    pub fn conv_t2d(
        store: &mut ParamStore,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Self::build(store, name, ConvKind::ConvT2, ci, co, [1, k, k], [1, stride, stride], [0, pad, pad], rng)
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        store: &mut ParamStore,
        name: &str,
        kind: ConvKind,
        ci: usize,
        co: usize,
        k: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if ci == 0 || co == 0 || k.contains(&0) || stride.contains(&0) {
            return Err(invalid(format!("conv `{name}`: channels, kernel and stride must be positive")));
        }
        let kvol: usize = k.iter().product();
        let spatial: &[usize] = match kind {
            ConvKind::Conv2 | ConvKind::ConvT2 => &k[1..],
            _ => &k[..],
        };
        let (lead, fan_in) = match kind {
            ConvKind::Conv2 | ConvKind::Conv3 => ([co, ci], ci * kvol),
            _ => ([ci, co], (ci * kvol / stride.iter().product::<usize>()).max(ci)),
        };
        let mut shape = lead.to_vec();
        shape.extend_from_slice(spatial);
        let w = store.add(format!("{name}.weight"), init_weight(&shape, fan_in, rng))?;
        let b = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[co]))?);
        Ok(Self { w, b, kind, stride, pad })
    }

    /// Sets weight and bias to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        for id in [Some(self.w), self.b].into_iter().flatten() {
            store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = self.b.map(|b| tape.param(b));
        let (s2, p2) = ([self.stride[1], self.stride[2]], [self.pad[1], self.pad[2]]);
        match self.kind {
            ConvKind::Conv3 => tape.conv3d(x, w, b, self.stride, self.pad),
            ConvKind::Conv2 => tape.conv2d(x, w, b, s2, p2),
            ConvKind::ConvT3 => tape.conv_transpose3d(x, w, b, self.stride, self.pad),
            ConvKind::ConvT2 => tape.conv_transpose2d(x, w, b, s2, p2),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(invalid(format!("`{name}`: {channels} channels not divisible into {groups} groups")));
        }
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]))?;
        Ok(Self { gamma, beta, groups })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(self.gamma), tape.param(self.beta));
        tape.group_norm(x, self.groups, g, b, 1e-5)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fin: usize, fout: usize, rng: &mut SeededRng) -> Result<Self> {
        let w = store.add(format!("{name}.weight"), init_weight(&[fout, fin], fin, rng))?;
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[fout]))?;
        Ok(Self { w, b })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        tape.linear(x, w, Some(b))
    }
}
