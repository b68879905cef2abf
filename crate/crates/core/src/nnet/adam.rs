use super::tensor::{Grads, ParamStore, Tensor};
use crate::error::{invalid, Error, Result};

/// Adam with bias correction. Moment buffers are indexed like the store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Moments as checkpoint entries named `m.<param>` and `v.<param>`.
    pub fn entries(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (id, p) in store.iter() {
            let shape = p.value.shape().to_vec();
            out.push((format!("m.{}", p.name), Tensor::new(shape.clone(), self.m[id.index()].clone()).unwrap()));
            out.push((format!("v.{}", p.name), Tensor::new(shape, self.v[id.index()].clone()).unwrap()));
        }
        out
    }

    /// Restores moments written by [`AdamState::entries`] and the step count.
    pub fn restore(&mut self, store: &ParamStore, entries: Vec<(String, Tensor)>, step: u64) -> Result<()> {
        for (name, t) in entries {
            let (slot, pname) = match name.split_once('.') {
                Some(("m", rest)) => (&mut self.m, rest),
                Some(("v", rest)) => (&mut self.v, rest),
                _ => return Err(Error::Format(format!("unexpected optimizer entry `{name}`"))),
            };
            let id = store
                .id(pname)
                .ok_or_else(|| Error::Format(format!("optimizer entry for unknown parameter `{pname}`")))?;
            if t.numel() != slot[id.index()].len() {
                return Err(Error::Shape(format!("optimizer entry `{name}` has wrong size")));
            }
            slot[id.index()] = t.into_data();
        }
        self.step = step;
        Ok(())
    }
}

/// One Adam update of every trainable parameter.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, grads: &Grads) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(invalid("optimizer state, gradients and store disagree in size"));
    }
    for (id, p) in store.iter() {
        if p.requires_grad && grads.get(id).is_none() {
            return Err(Error::MissingGrad(p.name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.requires_grad).map(|(id, _)| id).collect();
    for id in ids {
        let g = grads.get(id).expect("checked above");
        let (m, v) = (&mut state.m[id.index()], &mut state.v[id.index()]);
        let w = store.get_mut(id).value.data_mut();
        for k in 0..w.len() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            w[k] -= state.learning_rate * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}
