//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output and whatever the backward
//! pass needs. Parameters are read in place from the borrowed [`ParamStore`];
//! each parameter gets at most one node per tape, so its gradient is that
//! node's gradient. Nodes whose inputs need no gradient are skipped during the
//! backward sweep.

use super::kernels::{conv_backward, conv_forward, convt_backward, convt_forward, gemm, ConvGeom};
use super::tensor::{Grads, ParamId, ParamStore, Tensor};
use crate::error::{invalid, shape, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Storage {
    Owned(Vec<f64>),
    Param(ParamId),
}

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        n: usize,
        g: ConvGeom,
        transposed: bool,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Relu(Var),
    LeakyRelu(Var, f64),
    Silu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Var, Var),
    Slice { x: Var, start: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    ChannelBias { x: Var, b: Var },
    Mse(Var, Var),
    L1(Var, Var),
    Mean(Var),
}

struct Node {
    shape: Vec<usize>,
    data: Storage,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    vars: Vec<Option<Vec<f64>>>,
    params: Grads,
}

impl Gradients {
    /// Gradient of the loss with respect to an input created by
    /// [`Tape::input_grad`].
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.vars.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn params(&self) -> &Grads {
        &self.params
    }

    pub fn into_params(self) -> Grads {
        self.params
    }
}

fn conv_out(i: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    if s == 0 || i + 2 * p < k {
        return Err(shape(format!("kernel {k} does not fit input {i} with padding {p}")));
    }
    Ok((i + 2 * p - k) / s + 1)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Calls `f(out_index, in_index)` for every element of a permuted tensor.
fn for_each_permuted(in_shape: &[usize], axes: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = in_shape.len();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total: usize = in_shape.iter().product();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for o in 0..total {
        f(o, src);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), param_vars: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data: Storage::Owned(data), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].data {
            Storage::Owned(d) => d,
            Storage::Param(id) => self.params.get(*id).value.data(),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("tape node is consistent")
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Gradients::wrt`].
    pub fn input_grad(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let p = self.params.get(id);
        self.nodes.push(Node {
            shape: p.value.shape().to_vec(),
            data: Storage::Param(id),
            op: Op::Leaf,
            needs_grad: p.requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn conv_impl(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
        pad: [usize; 3],
        transposed: bool,
        rank: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != rank + 2 || ws.len() != rank + 2 {
            return Err(shape(format!("conv expects rank-{} input and weight, got {xs:?} and {ws:?}", rank + 2)));
        }
        let lift = |s: &[usize], fill: usize| -> [usize; 3] {
            if rank == 3 {
                [s[0], s[1], s[2]]
            } else {
                [fill, s[0], s[1]]
            }
        };
        let n = xs[0];
        let spatial = lift(&xs[2..], 1);
        let kernel = lift(&ws[2..], 1);
        let (w_in, w_out) = if transposed { (ws[0], ws[1]) } else { (ws[1], ws[0]) };
        if xs[1] != w_in {
            return Err(shape(format!("conv input has {} channels, weight expects {w_in}", xs[1])));
        }
        if let Some(b) = b {
            if self.shape(b) != [w_out] {
                return Err(shape(format!("conv bias {:?} does not match {w_out} channels", self.shape(b))));
            }
        }
        let mut other = [0; 3];
        for k in 0..3 {
            other[k] = if transposed {
                let full = (spatial[k] - 1) * stride[k] + kernel[k];
                if full <= 2 * pad[k] {
                    return Err(shape("transposed conv output would be empty"));
                }
                full - 2 * pad[k]
            } else {
                conv_out(spatial[k], kernel[k], stride[k], pad[k])?
            };
        }
        let g = if transposed {
            ConvGeom { ci: w_out, co: w_in, input: other, kernel, stride, pad, output: spatial }
        } else {
            ConvGeom { ci: w_in, co: w_out, input: spatial, kernel, stride, pad, output: other }
        };
        let bias = b.map(|b| self.value(b));
        let out = if transposed {
            convt_forward(self.value(x), self.value(w), bias, n, &g)
        } else {
            conv_forward(self.value(x), self.value(w), bias, n, &g)
        };
        let mut shape_out = vec![n, w_out];
        shape_out.extend_from_slice(if rank == 3 { &other[..] } else { &other[1..] });
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(shape_out, out, Op::Conv { x, w, b, n, g, transposed }, needs))
    }

    /// `x: [N, Ci, D, H, W]`, `w: [Co, Ci, kd, kh, kw]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        self.conv_impl(x, w, b, stride, pad, false, 3)
    }

    /// `x: [N, Ci, H, W]`, `w: [Co, Ci, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: [usize; 2], pad: [usize; 2]) -> Result<Var> {
        self.conv_impl(x, w, b, [1, stride[0], stride[1]], [0, pad[0], pad[1]], false, 2)
    }

    /// `x: [N, Ci, D, H, W]`, `w: [Ci, Co, kd, kh, kw]`; output extent
    /// `(in − 1)·stride − 2·pad + k`.
    pub fn conv_transpose3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var> {
        self.conv_impl(x, w, b, stride, pad, true, 3)
    }

    /// `x: [N, Ci, H, W]`, `w: [Ci, Co, kh, kw]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 2],
        pad: [usize; 2],
    ) -> Result<Var> {
        self.conv_impl(x, w, b, [1, stride[0], stride[1]], [0, pad[0], pad[1]], true, 2)
    }

    /// Normalizes each `(sample, group)` slab to zero mean and unit variance,
    /// then applies the per-channel affine `gamma`, `beta`.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(shape("group_norm needs [N, C, ...]"));
        }
        let (n, c) = (xs[0], xs[1]);
        if groups == 0 || c % groups != 0 {
            return Err(invalid(format!("{c} channels are not divisible into {groups} groups")));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape("group_norm affine parameters must be [C]"));
        }
        let spatial: usize = xs[2..].iter().product();
        let cg = c / groups;
        let m = cg * spatial;
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; n * groups];
        for s in 0..n {
            for g in 0..groups {
                let base = (s * c + g * cg) * spatial;
                let slab = &xv[base..base + m];
                let mean = slab.iter().sum::<f64>() / m as f64;
                let var = slab.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                let r = 1.0 / (var + eps).sqrt();
                rstd[s * groups + g] = r;
                for ch in 0..cg {
                    let cc = g * cg + ch;
                    for k in 0..spatial {
                        let i = base + ch * spatial + k;
                        let h = (xv[i] - mean) * r;
                        xhat[i] = h;
                        out[i] = h * gv[cc] + bv[cc];
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(xs, out, Op::GroupNorm { x, gamma, beta, groups, xhat, rstd }, needs))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), out, op, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Silu(x), |v| v * sigmoid(v))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape(format!("operands differ: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), out, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn reshape(&mut self, x: Var, shape_new: &[usize]) -> Result<Var> {
        if shape_new.iter().product::<usize>() != self.value(x).len() {
            return Err(shape(format!("cannot reshape {:?} to {shape_new:?}", self.shape(x))));
        }
        let data = self.value(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(shape_new.to_vec(), data, Op::Reshape(x), needs))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if axes.len() != xs.len() || axes.iter().any(|&a| a >= xs.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(invalid(format!("{axes:?} is not a permutation of rank {}", xs.len())));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for_each_permuted(&xs, axes, |o, i| out[o] = xv[i]);
        let shape_out = axes.iter().map(|&a| xs[a]).collect();
        let needs = self.needs(x);
        Ok(self.push(shape_out, out, Op::Permute(x, axes.to_vec()), needs))
    }

    /// Joins `[N, C1, ...]` and `[N, C2, ...]` into `[N, C1 + C2, ...]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(shape(format!("cannot concat channels of {sa:?} and {sb:?}")));
        }
        let n = sa[0];
        let (la, lb) = (sa[1..].iter().product::<usize>(), sb[1..].iter().product::<usize>());
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(n * (la + lb));
        for s in 0..n {
            out.extend_from_slice(&va[s * la..(s + 1) * la]);
            out.extend_from_slice(&vb[s * lb..(s + 1) * lb]);
        }
        let mut shape_out = sa.clone();
        shape_out[1] += sb[1];
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape_out, out, Op::Concat(a, b), needs))
    }

    /// Channels `start..start + len` of `[N, C, ...]`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || len == 0 || start + len > xs[1] {
            return Err(shape(format!("channel slice {start}..{} out of {xs:?}", start + len)));
        }
        let sp: usize = xs[2..].iter().product();
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xs[0] * len * sp);
        for s in 0..xs[0] {
            let base = (s * xs[1] + start) * sp;
            out.extend_from_slice(&xv[base..base + len * sp]);
        }
        let mut shape_out = xs;
        shape_out[1] = len;
        let needs = self.needs(x);
        Ok(self.push(shape_out, out, Op::Slice { x, start }, needs))
    }

    /// `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape(format!("linear: input {xs:?}, weight {ws:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape("linear bias must be [out]"));
            }
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * fout];
        gemm(n, fin, fout, self.value(x), false, self.value(w), true, 0.0, &mut out);
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_mut(fout) {
                row.iter_mut().zip(bv).for_each(|(o, bb)| *o += bb);
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(vec![n, fout], out, Op::Linear { x, w, b }, needs))
    }

    /// Adds `b: [N, C]` to every spatial position of `x: [N, C, ...]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(b) != [xs[0], xs[1]] {
            return Err(shape(format!("channel bias {:?} does not match {xs:?}", self.shape(b))));
        }
        let sp: usize = xs[2..].iter().product();
        let bv = self.value(b);
        let mut out = self.value(x).to_vec();
        for (k, chunk) in out.chunks_mut(sp).enumerate() {
            chunk.iter_mut().for_each(|v| *v += bv[k]);
        }
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(xs, out, Op::ChannelBias { x, b }, needs))
    }

    fn check_same(&self, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape(format!("loss operands differ: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// `mean((a − b)²)`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b)?;
        let n = self.value(a).len() as f64;
        let s: f64 = self.value(a).iter().zip(self.value(b)).map(|(x, y)| (x - y) * (x - y)).sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![1], vec![s / n], Op::Mse(a, b), needs))
    }

    /// `mean(|a − b|)`.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b)?;
        let n = self.value(a).len() as f64;
        let s: f64 = self.value(a).iter().zip(self.value(b)).map(|(x, y)| (x - y).abs()).sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![1], vec![s / n], Op::L1(a, b), needs))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let needs = self.needs(x);
        self.push(vec![1], vec![m], Op::Mean(x), needs)
    }

    /// Gradients of the scalar `loss` with respect to every tracked input and
    /// every trainable parameter that took part in the computation.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(shape(format!("backward needs a scalar loss, got {:?}", self.shape(loss))));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut [f64]> {
            if !nodes[v.0].needs_grad {
                return None;
            }
            let len = nodes[v.0].shape.iter().product();
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
        }

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            let y = match &node.data {
                Storage::Owned(d) => d.as_slice(),
                Storage::Param(_) => unreachable!("parameters are leaves"),
            };
            match &node.op {
                Op::Leaf => {}
                Op::Conv { x, w, b, n, g, transposed } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let mut dx = self.needs(*x).then(|| vec![0.0; xv.len()]);
                    let mut dw = self.needs(*w).then(|| vec![0.0; wv.len()]);
                    let mut db = b.filter(|b| self.needs(*b)).map(|b| vec![0.0; self.value(b).len()]);
                    let f = if *transposed { convt_backward } else { conv_backward };
                    f(xv, wv, &gy, *n, g, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                    for (v, d) in [(Some(*x), dx), (Some(*w), dw), (*b, db)] {
                        if let (Some(v), Some(d)) = (v, d) {
                            let s = slot(&mut grads, nodes, v).unwrap();
                            s.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
                        }
                    }
                }
                Op::GroupNorm { x, gamma, beta, groups, xhat, rstd } => {
                    let shape_x = &nodes[x.0].shape;
                    let (n, c) = (shape_x[0], shape_x[1]);
                    let sp: usize = shape_x[2..].iter().product();
                    let cg = c / groups;
                    let m = (cg * sp) as f64;
                    let gv = self.value(*gamma);
                    if let Some(dg) = slot(&mut grads, nodes, *gamma) {
                        for (k, (g, h)) in gy.iter().zip(xhat).enumerate() {
                            dg[(k / sp) % c] += g * h;
                        }
                    }
                    if let Some(db) = slot(&mut grads, nodes, *beta) {
                        for (k, g) in gy.iter().enumerate() {
                            db[(k / sp) % c] += g;
                        }
                    }
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        for s in 0..n {
                            for g in 0..*groups {
                                let base = (s * c + g * cg) * sp;
                                let (mut sum_d, mut sum_dh) = (0.0, 0.0);
                                for k in 0..cg * sp {
                                    let d = gy[base + k] * gv[g * cg + k / sp];
                                    sum_d += d;
                                    sum_dh += d * xhat[base + k];
                                }
                                let r = rstd[s * groups + g];
                                for k in 0..cg * sp {
                                    let d = gy[base + k] * gv[g * cg + k / sp];
                                    dx[base + k] += r * (d - sum_d / m - xhat[base + k] * sum_dh / m);
                                }
                            }
                        }
                    }
                }
                Op::Relu(x) => {
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        for ((d, g), yy) in dx.iter_mut().zip(&gy).zip(y) {
                            if *yy > 0.0 {
                                *d += g;
                            }
                        }
                    }
                }
                Op::LeakyRelu(x, slope) => {
                    let xv = self.value(*x);
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        for ((d, g), xx) in dx.iter_mut().zip(&gy).zip(xv) {
                            *d += if *xx > 0.0 { *g } else { slope * g };
                        }
                    }
                }
                Op::Silu(x) => {
                    let xv = self.value(*x);
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        for ((d, g), xx) in dx.iter_mut().zip(&gy).zip(xv) {
                            let s = sigmoid(*xx);
                            *d += g * s * (1.0 + xx * (1.0 - s));
                        }
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        da.iter_mut().zip(&gy).for_each(|(d, g)| *d += g);
                    }
                    if let Some(db) = slot(&mut grads, nodes, *b) {
                        db.iter_mut().zip(&gy).for_each(|(d, g)| *d += sign * g);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        for ((d, g), bb) in da.iter_mut().zip(&gy).zip(bv) {
                            *d += g * bb;
                        }
                    }
                    if let Some(db) = slot(&mut grads, nodes, *b) {
                        for ((d, g), aa) in db.iter_mut().zip(&gy).zip(av) {
                            *d += g * aa;
                        }
                    }
                }
                Op::Scale(x, s) => {
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        dx.iter_mut().zip(&gy).for_each(|(d, g)| *d += s * g);
                    }
                }
                Op::Reshape(x) => {
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        dx.iter_mut().zip(&gy).for_each(|(d, g)| *d += g);
                    }
                }
                Op::Permute(x, axes) => {
                    let xs = nodes[x.0].shape.clone();
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        for_each_permuted(&xs, axes, |o, i| dx[i] += gy[o]);
                    }
                }
                Op::Concat(a, b) => {
                    let n = node.shape[0];
                    let la: usize = nodes[a.0].shape[1..].iter().product();
                    let lb: usize = nodes[b.0].shape[1..].iter().product();
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        for s in 0..n {
                            let src = &gy[s * (la + lb)..s * (la + lb) + la];
                            da[s * la..(s + 1) * la].iter_mut().zip(src).for_each(|(d, g)| *d += g);
                        }
                    }
                    if let Some(db) = slot(&mut grads, nodes, *b) {
                        for s in 0..n {
                            let src = &gy[s * (la + lb) + la..(s + 1) * (la + lb)];
                            db[s * lb..(s + 1) * lb].iter_mut().zip(src).for_each(|(d, g)| *d += g);
                        }
                    }
                }
                Op::Slice { x, start } => {
                    let xs = nodes[x.0].shape.clone();
                    let len = node.shape[1];
                    let sp: usize = xs[2..].iter().product();
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        for s in 0..xs[0] {
                            let base = (s * xs[1] + start) * sp;
                            let src = &gy[s * len * sp..(s + 1) * len * sp];
                            dx[base..base + len * sp].iter_mut().zip(src).for_each(|(d, g)| *d += g);
                        }
                    }
                }
                Op::Linear { x, w, b } => {
                    let (n, fin) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                    let fout = nodes[w.0].shape[0];
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        gemm(n, fout, fin, &gy, false, wv, false, 1.0, dx);
                    }
                    if let Some(dw) = slot(&mut grads, nodes, *w) {
                        gemm(fout, n, fin, &gy, true, xv, false, 1.0, dw);
                    }
                    if let Some(b) = b {
                        if let Some(db) = slot(&mut grads, nodes, *b) {
                            for row in gy.chunks(fout) {
                                db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                            }
                        }
                    }
                }
                Op::ChannelBias { x, b } => {
                    let sp: usize = nodes[x.0].shape[2..].iter().product();
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        dx.iter_mut().zip(&gy).for_each(|(d, g)| *d += g);
                    }
                    if let Some(db) = slot(&mut grads, nodes, *b) {
                        for (k, chunk) in gy.chunks(sp).enumerate() {
                            db[k] += chunk.iter().sum::<f64>();
                        }
                    }
                }
                Op::Mse(a, b) | Op::L1(a, b) => {
                    let is_mse = matches!(node.op, Op::Mse(..));
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let scale = gy[0] / av.len() as f64;
                    let d: Vec<f64> = av
                        .iter()
                        .zip(bv)
                        .map(|(x, y)| {
                            let r = x - y;
                            if is_mse {
                                2.0 * r * scale
                            } else if r > 0.0 {
                                scale
                            } else if r < 0.0 {
                                -scale
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        da.iter_mut().zip(&d).for_each(|(g, v)| *g += v);
                    }
                    if let Some(db) = slot(&mut grads, nodes, *b) {
                        db.iter_mut().zip(&d).for_each(|(g, v)| *g -= v);
                    }
                }
                Op::Mean(x) => {
                    let len = self.value(*x).len() as f64;
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        dx.iter_mut().for_each(|d| *d += gy[0] / len);
                    }
                }
            }
        }

        let mut pgrads = vec![None; self.params.len()];
        for (k, pv) in self.param_vars.iter().enumerate() {
            if let Some(v) = pv {
                if nodes[v.0].needs_grad {
                    let len = nodes[v.0].shape.iter().product();
                    pgrads[k] = Some(grads[v.0].take().unwrap_or_else(|| vec![0.0; len]));
                }
            }
        }
        Ok(Gradients { vars: grads, params: Grads::from_vec(pgrads) })
    }
}
