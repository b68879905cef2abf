use std::collections::HashMap;

use crate::error::{invalid, shape, Error, Result};
use crate::voxcore::{DomainTag, Projection, SeededRng, Volume};

/// Dense row-major array; the last axis is fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(invalid(format!("tensor extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(&shape, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut SeededRng) -> Self {
        let mut t = Self::zeros(shape);
        rng.fill_normal(&mut t.data);
        t.data.iter_mut().for_each(|v| *v *= std);
        t
    }

    /// `[1, 1, Z, Y, X]` view of a volume (x fastest on both sides).
    pub fn from_volume(v: &Volume) -> Self {
        let [x, y, z] = v.dims();
        Self { shape: vec![1, 1, z, y, x], data: v.data().to_vec() }
    }

    /// Stacks single-channel volumes of equal dims into `[N, 1, Z, Y, X]`.
    pub fn stack_volumes(vs: &[&Volume]) -> Result<Self> {
        let first = vs.first().ok_or_else(|| invalid("cannot stack zero volumes"))?;
        let [x, y, z] = first.dims();
        let mut data = Vec::with_capacity(vs.len() * first.len());
        for v in vs {
            first.same_dims(v)?;
            data.extend_from_slice(v.data());
        }
        Ok(Self { shape: vec![vs.len(), 1, z, y, x], data })
    }

    /// `[1, 1, V, U]` view of a projection.
    pub fn from_projection(p: &Projection) -> Self {
        let [u, v] = p.dims();
        Self { shape: vec![1, 1, v, u], data: p.data().to_vec() }
    }

    /// Inverse of [`Tensor::from_volume`] for a single-sample, single-channel
    /// tensor.
    pub fn to_volume(&self, spacing: [f64; 3], domain: DomainTag) -> Result<Volume> {
        match self.shape.as_slice() {
            [1, 1, z, y, x] => Volume::from_data([*x, *y, *z], spacing, self.data.clone(), domain),
            other => Err(shape(format!("expected [1, 1, Z, Y, X], got {other:?}"))),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(shape_err(&shape, self.data.len()));
        }
        self.shape = shape;
        Ok(self)
    }
}

fn shape_err(shape: &[usize], len: usize) -> Error {
    Error::Shape(format!("shape {shape:?} does not hold {len} values"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub requires_grad: bool,
}

/// Ordered, named parameter list shared by every network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(invalid(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value, requires_grad: true });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars across all parameters.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Sets `requires_grad = !frozen` on every parameter whose name starts with
    /// `prefix`; returns how many matched.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.requires_grad = !frozen;
            n += 1;
        }
        n
    }

    /// Copies values by name from `entries`; every entry must match an
    /// existing parameter of the same shape.
    pub fn load_entries(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        for (name, t) in entries {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint has unknown parameter `{name}`")))?;
            let p = &mut self.params[id.0];
            if p.value.shape() != t.shape() {
                return Err(shape(format!(
                    "parameter `{name}`: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }
}

/// Per-parameter gradients, indexed like the store they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn empty(n_params: usize) -> Self {
        Self { grads: vec![None; n_params] }
    }

    pub(crate) fn from_vec(grads: Vec<Option<Vec<f64>>>) -> Self {
        Self { grads }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Elementwise `self += other`.
    pub fn accumulate(&mut self, other: &Grads) -> Result<()> {
        if other.grads.len() != self.grads.len() {
            return Err(shape("gradient sets come from different stores"));
        }
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads.iter().flatten().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let n = self.norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
    }
}
