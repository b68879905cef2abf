//! Timestep coefficient tables.
//!
//! Timesteps are 1-indexed; index 0 is the clean state in every table.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Brownian-bridge interpolation and variance tables for the coarse stage.
#[derive(Clone, Debug, PartialEq)]
pub struct BridgeSchedule {
    t_max: usize,
    s_max: f64,
    alpha: Vec<f64>,
    delta: Vec<f64>,
}

impl BridgeSchedule {
    /// `α_t = t/T`, `δ_t = 2·s_max·(α_t − α_t²)`.
    pub fn new(t_max: usize, s_max: f64) -> Result<Self> {
        if t_max < 2 {
            return Err(invalid(format!("bridge schedule needs T >= 2, got {t_max}")));
        }
        if !(s_max > 0.0 && s_max.is_finite()) {
            return Err(invalid(format!("s_max must be positive, got {s_max}")));
        }
        let alpha: Vec<f64> = (0..=t_max).map(|t| t as f64 / t_max as f64).collect();
        let delta = alpha.iter().map(|&a| 2.0 * s_max * (a - a * a)).collect();
        Ok(Self { t_max, s_max, alpha, delta })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn s_max(&self) -> f64 {
        self.s_max
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn delta(&self, t: usize) -> f64 {
        self.delta[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn deltas(&self) -> &[f64] {
        &self.delta
    }
}

pub fn bridge_schedule(t_max: usize, s_max: f64) -> Result<BridgeSchedule> {
    BridgeSchedule::new(t_max, s_max)
}

/// Linear-β DDPM schedule with cumulative products `ᾱ_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct DdpmSchedule {
    t_max: usize,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl DdpmSchedule {
    pub fn new(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max < 1 {
            return Err(invalid("DDPM schedule needs T >= 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(invalid(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let mut beta = vec![0.0; t_max + 1];
        let mut alpha_bar = vec![1.0; t_max + 1];
        for t in 1..=t_max {
            beta[t] = if t_max == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * (t - 1) as f64 / (t_max - 1) as f64
            };
            alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta[t]);
        }
        Ok(Self { t_max, beta, alpha_bar })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// `β_t` for `t >= 1`; index 0 holds 0.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

pub fn ddpm_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<DdpmSchedule> {
    DdpmSchedule::new(t_max, beta_start, beta_end)
}

/// Strictly increasing sub-sequence of timesteps ending at `T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DdimPlan {
    sub_steps: Vec<usize>,
    eta: f64,
}

impl DdimPlan {
    pub fn new(sub_steps: Vec<usize>, eta: f64) -> Result<Self> {
        if sub_steps.is_empty() {
            return Err(invalid("DDIM plan is empty"));
        }
        if sub_steps[0] == 0 || sub_steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("DDIM steps must be strictly increasing and >= 1"));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(invalid(format!("eta must lie in [0, 1], got {eta}")));
        }
        Ok(Self { sub_steps, eta })
    }

    pub fn steps(&self) -> &[usize] {
        &self.sub_steps
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn last(&self) -> usize {
        *self.sub_steps.last().unwrap()
    }

    /// `(t, t')` pairs visited by a sampler, from `T` down to `(t_1, 0)`.
    pub fn transitions(&self) -> Vec<(usize, usize)> {
        let s = &self.sub_steps;
        (0..s.len())
            .rev()
            .map(|i| (s[i], if i == 0 { 0 } else { s[i - 1] }))
            .collect()
    }
}

/// `round(k·T/n)` for `k = 1..=n`, deduplicated.
pub fn ddim_plan(t_max: usize, n_steps: usize, eta: f64) -> Result<DdimPlan> {
    if n_steps < 1 || n_steps > t_max {
        return Err(invalid(format!("need 1 <= n_steps <= T, got n={n_steps}, T={t_max}")));
    }
    let mut steps: Vec<usize> = (1..=n_steps)
        .map(|k| (k as f64 * t_max as f64 / n_steps as f64).round() as usize)
        .filter(|&t| t >= 1)
        .collect();
    steps.dedup();
    DdimPlan::new(steps, eta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bridge_invariants() {
        for t in [2, 10, 1000] {
            let s = bridge_schedule(t, 1.0).unwrap();
            assert_eq!(s.alpha(0), 0.0);
            assert_eq!(s.alpha(t), 1.0);
            assert_eq!(s.delta(0), 0.0);
            assert_eq!(s.delta(t), 0.0);
            assert!(s.deltas().iter().all(|&d| d >= 0.0));
            assert!(s.alphas().windows(2).all(|w| w[0] <= w[1]));
        }
        let s = bridge_schedule(1000, 1.0).unwrap();
        assert_eq!(s.alpha(500), 0.5);
        assert_eq!(s.delta(500), 0.5);
        assert!(bridge_schedule(1, 1.0).is_err());
    }

    #[test]
    fn ddpm_values() {
        let s = ddpm_schedule(1, 0.01, 0.01).unwrap();
        assert_eq!(s.alpha_bar(1), 0.99);
        let s = ddpm_schedule(1000, 1e-4, 2e-2).unwrap();
        // direct product, independent of the stored table
        let mut prod = 1.0;
        for i in 0..1000 {
            prod *= 1.0 - (1e-4 + (2e-2 - 1e-4) * i as f64 / 999.0);
        }
        assert!((s.alpha_bar(1000) - prod).abs() < 1e-15);
        assert!(s.alpha_bar(1000) < 1e-4);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(ddpm_schedule(10, 0.5, 0.1).is_err());
        assert!(ddpm_schedule(10, 0.0, 0.1).is_err());
    }

    #[test]
    fn plans() {
        let p = ddim_plan(1000, 50, 0.0).unwrap();
        assert_eq!(p.steps(), (1..=50).map(|k| 20 * k).collect::<Vec<_>>());
        assert_eq!(ddim_plan(7, 7, 0.0).unwrap().steps(), &[1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(ddim_plan(1000, 1, 0.0).unwrap().steps(), &[1000]);
        assert!(ddim_plan(10, 0, 0.0).is_err());
        let p = ddim_plan(10, 3, 0.0).unwrap();
        assert_eq!(p.steps(), &[3, 7, 10]);
        assert_eq!(p.transitions(), vec![(10, 7), (7, 3), (3, 0)]);
    }
}
