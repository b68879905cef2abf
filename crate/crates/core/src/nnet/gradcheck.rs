//! Central finite-difference checks of tape gradients.
//!
//! Relative error is `|analytic − numeric| / max(|analytic|, |numeric|, floor)`,
//! so gradients far below `floor` are compared in absolute terms.

use super::tape::{Tape, Var};
use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::{invalid, Result};
use crate::voxcore::SeededRng;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_error: f64,
    /// Human-readable location of the worst probe.
    pub worst: String,
}

impl GradCheckReport {
    fn new() -> Self {
        Self { probes: 0, max_rel_error: 0.0, worst: String::new() }
    }

    fn record(&mut self, analytic: f64, numeric: f64, floor: f64, what: impl FnOnce() -> String) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        self.probes += 1;
        if rel > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = format!("{} (analytic {analytic:e}, numeric {numeric:e})", what());
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        if other.max_rel_error > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.probes += other.probes;
    }
}

fn scalar(tape: &Tape, v: Var) -> Result<f64> {
    match tape.value(v) {
        [x] => Ok(*x),
        _ => Err(invalid("gradient check needs a scalar loss")),
    }
}

/// Checks `probes` randomly chosen scalars across the trainable parameters of
/// `store`, against the loss built by `f`.
pub fn check_params<F>(
    store: &mut ParamStore,
    probes: usize,
    h: f64,
    floor: f64,
    rng: &mut SeededRng,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        tape.backward(loss)?.into_params()
    };
    let trainable: Vec<ParamId> = store
        .iter()
        .filter(|(id, p)| p.requires_grad && grads.get(*id).is_some())
        .map(|(id, _)| id)
        .collect();
    if trainable.is_empty() {
        return Err(invalid("no trainable parameter reached the loss"));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        scalar(&tape, loss)
    };
    let mut report = GradCheckReport::new();
    for k in 0..probes {
        // Cycle through parameters so every tensor gets probed.
        let id = trainable[k % trainable.len()];
        let len = store.get(id).value.numel();
        let i = rng.int_range(0, len - 1);
        let orig = store.get(id).value.data()[i];
        store.get_mut(id).value.data_mut()[i] = orig + h;
        let plus = eval(store)?;
        store.get_mut(id).value.data_mut()[i] = orig - h;
        let minus = eval(store)?;
        store.get_mut(id).value.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads.get(id).unwrap()[i];
        report.record(analytic, numeric, floor, || format!("{}[{i}]", store.get(id).name));
    }
    Ok(report)
}

/// Checks `probes` random scalars of the given inputs. `f` receives one
/// gradient-tracked variable per input.
pub fn check_inputs<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    probes: usize,
    h: f64,
    floor: f64,
    rng: &mut SeededRng,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let run = |inputs: &[Tensor]| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input_grad(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let value = scalar(&tape, loss)?;
        let g = tape.backward(loss)?;
        let grads = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| g.wrt(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        Ok((value, grads))
    };
    let (_, grads) = run(inputs)?;
    let mut work = inputs.to_vec();
    let mut report = GradCheckReport::new();
    for k in 0..probes {
        let which = k % inputs.len();
        let i = rng.int_range(0, inputs[which].numel() - 1);
        let orig = inputs[which].data()[i];
        work[which].data_mut()[i] = orig + h;
        let plus = run(&work)?.0;
        work[which].data_mut()[i] = orig - h;
        let minus = run(&work)?.0;
        work[which].data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        report.record(grads[which][i], numeric, floor, || format!("input{which}[{i}]"));
    }
    Ok(report)
}
