use axon_core::coarsediff::{
    bridge_forward, bridge_forward_with_noise, bridge_sample, bridge_sample_with, coarse_loss, coarse_train_step,
    CoarseConfig, CoarseModel, CoarseSample, EncoderLift, FusionBlock, Views,
};
use axon_core::nnet::{AdamState, ParamStore, Tape, Tensor};
use axon_core::schedules::{ddim_plan, BridgeSchedule, DdimPlan};
use axon_core::{DomainTag, Error, Projection, SeededRng, ViewTag, Volume};
use proptest::prelude::*;

fn cfg(proj: usize, r: usize, bi: bool) -> CoarseConfig {
    CoarseConfig {
        proj_size: proj,
        r,
        bi_planar: bi,
        enc_channels: 4,
        unet_base: 8,
        unet_mults: vec![1, 2],
        bridge_t: 10,
        s_max: 1.0,
        spacing: [1.0; 3],
    }
}

fn proj(n: usize, view: ViewTag, rng: &mut SeededRng) -> Projection {
    let data = (0..n * n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    Projection::new([n, n], 1.0, data, view).unwrap()
}

fn vol(n: usize, rng: &mut SeededRng, domain: DomainTag) -> Volume {
    let data = (0..n * n * n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    Volume::from_data([n; 3], [1.0; 3], data, domain).unwrap()
}

#[test]
fn encoder_downsamples_by_r() {
    let mut rng = SeededRng::new(1, 0);
    let c = CoarseConfig { unet_mults: vec![1, 2, 4], ..cfg(64, 8, false) };
    let m = CoarseModel::new(c, 3).unwrap();
    let v = m.encode_condition(&Views::single(proj(64, ViewTag::Pa, &mut rng))).unwrap();
    assert_eq!(v.dims(), [8, 8, 8]);
    assert_eq!(m.encoder.depth(), 8);
}

#[test]
fn single_and_biplanar_shapes_agree() {
    let mut rng = SeededRng::new(2, 0);
    let single = CoarseModel::new(cfg(32, 4, false), 5).unwrap();
    let bi = CoarseModel::new(cfg(32, 4, true), 5).unwrap();
    let pa = proj(32, ViewTag::Pa, &mut rng);
    let lat = proj(32, ViewTag::Lateral, &mut rng);
    let a = single.encode_condition(&Views::single(pa.clone())).unwrap();
    let b = bi.encode_condition(&Views::bi_planar(pa, lat)).unwrap();
    assert_eq!(a.dims(), b.dims());
    assert_eq!(a.dims(), [8, 8, 8]);
}

#[test]
fn shared_encoder_weights_give_identical_encodings() {
    let mut rng = SeededRng::new(3, 0);
    let c = cfg(16, 4, true);
    let mut store = ParamStore::new();
    let enc = EncoderLift::new(&mut store, &c, &mut rng).unwrap();
    let p = proj(16, ViewTag::Pa, &mut rng);
    let t = Tensor::new(vec![1, 1, 16, 16], p.data().to_vec()).unwrap();
    let mut tape = Tape::new(&store);
    let a = tape.input(t.clone());
    let b = tape.input(t);
    let ea = enc.forward(&mut tape, a, ViewTag::Pa).unwrap();
    let eb = enc.forward(&mut tape, b, ViewTag::Pa).unwrap();
    assert_eq!(tape.value(ea), tape.value(eb));
}

#[test]
fn lateral_lift_places_depth_along_x() {
    // A 1-channel feature map lifted as PA puts the channel axis on y; as
    // lateral it goes on x. Same data, transposed placement.
    let mut rng = SeededRng::new(4, 0);
    let c = cfg(8, 2, false);
    let mut store = ParamStore::new();
    let enc = EncoderLift::new(&mut store, &c, &mut rng).unwrap();
    let p = proj(8, ViewTag::Pa, &mut rng);
    let mut tape = Tape::new(&store);
    let x = tape.input(Tensor::new(vec![1, 1, 8, 8], p.data().to_vec()).unwrap());
    let pa = enc.forward(&mut tape, x, ViewTag::Pa).unwrap();
    let lat = enc.forward(&mut tape, x, ViewTag::Lateral).unwrap();
    let (pa, lat) = (tape.value(pa).to_vec(), tape.value(lat).to_vec());
    let n = 4;
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                assert_eq!(pa[(z * n + y) * n + x], lat[(z * n + x) * n + y]);
            }
        }
    }
}

#[test]
fn encoder_errors() {
    let mut rng = SeededRng::new(5, 0);
    let m = CoarseModel::new(cfg(16, 4, true), 1).unwrap();
    let pa = proj(16, ViewTag::Pa, &mut rng);
    let two_pa = Views { pa: pa.clone(), lateral: Some(pa.clone()) };
    assert!(matches!(m.encode_condition(&two_pa), Err(Error::InvalidArgument(_))));
    let small = proj(8, ViewTag::Pa, &mut rng);
    let lat = proj(8, ViewTag::Lateral, &mut rng);
    assert!(m.encode_condition(&Views::bi_planar(small, lat)).is_err());
    assert!(Views::from_slice(&[pa.clone(), pa]).is_err());
    assert!(CoarseModel::new(cfg(16, 3, false), 1).is_err());
    assert!(CoarseModel::new(cfg(18, 4, false), 1).is_err());
}

#[test]
fn fusion_reduces_to_residual_when_main_branch_zeroed() {
    let mut rng = SeededRng::new(6, 0);
    let mut store = ParamStore::new();
    let f = FusionBlock::new(&mut store, 8, &mut rng).unwrap();
    f.zero_main_branch(&mut store);
    let x = Tensor::randn(&[1, 2, 4, 4, 4], 1.0, &mut rng);
    let mut tape = Tape::new(&store);
    let xv = tape.input(x.clone());
    let out = f.forward(&mut tape, xv).unwrap();
    assert_eq!(tape.shape(out), &[1, 1, 4, 4, 4]);
    let w = store.get(store.id("fusion.residual.weight").unwrap()).value.data().to_vec();
    let b = store.get(store.id("fusion.residual.bias").unwrap()).value.data()[0];
    for i in 0..64 {
        let expect = w[0] * x.data()[i] + w[1] * x.data()[64 + i] + b;
        assert!((tape.value(out)[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn bridge_forward_endpoints_and_midpoint() {
    let mut rng = SeededRng::new(7, 0);
    let s = BridgeSchedule::new(10, 1.0).unwrap();
    let x0 = vol(4, &mut rng, DomainTag::NormalizedPm1);
    let xt = vol(4, &mut rng, DomainTag::NormalizedPm1);
    let (a, _) = bridge_forward(&x0, &xt, 0, &s, &mut rng).unwrap();
    assert_eq!(a.data(), x0.data());
    let (b, _) = bridge_forward(&x0, &xt, 10, &s, &mut rng).unwrap();
    assert_eq!(b.data(), xt.data());
    let zero = Volume::new([4; 3], [1.0; 3], 0.0).unwrap();
    let mid = bridge_forward_with_noise(&x0, &xt, 5, &s, &zero).unwrap();
    for i in 0..64 {
        assert!((mid.data()[i] - 0.5 * (x0.data()[i] + xt.data()[i])).abs() < 1e-15);
    }
    let other = Volume::new([4, 4, 5], [1.0; 3], 0.0).unwrap();
    assert!(bridge_forward(&x0, &other, 3, &s, &mut rng).is_err());
    assert!(bridge_forward(&x0, &xt, 11, &s, &mut rng).is_err());
}

#[test]
fn bridge_forward_returns_the_noise_it_used() {
    let mut rng = SeededRng::new(8, 0);
    let s = BridgeSchedule::new(10, 1.0).unwrap();
    let x0 = vol(4, &mut rng, DomainTag::NormalizedPm1);
    let xt = vol(4, &mut rng, DomainTag::NormalizedPm1);
    let (x, eps) = bridge_forward(&x0, &xt, 3, &s, &mut rng).unwrap();
    let again = bridge_forward_with_noise(&x0, &xt, 3, &s, &eps).unwrap();
    assert_eq!(x.data(), again.data());
}

#[test]
fn zero_network_at_t0_has_zero_loss() {
    let mut rng = SeededRng::new(9, 0);
    let mut m = CoarseModel::new(cfg(16, 4, false), 1).unwrap();
    // Zero the output layer so the backbone predicts exactly zero.
    for name in ["backbone.dec.conv_out.weight", "backbone.dec.conv_out.bias"] {
        let id = m.params.id(name).unwrap();
        m.params.get_mut(id).value.data_mut().fill(0.0);
    }
    let x0 = vol(4, &mut rng, DomainTag::NormalizedPm1);
    let views = Views::single(proj(16, ViewTag::Pa, &mut rng));
    let (loss, _) = coarse_loss(&m, &x0, &views, 0, &mut rng).unwrap();
    assert_eq!(loss, 0.0);
    let (loss, _) = coarse_loss(&m, &x0, &views, 4, &mut rng).unwrap();
    assert!(loss > 0.0);
}

#[test]
fn coarse_loss_rejects_unnormalized_targets() {
    let mut rng = SeededRng::new(10, 0);
    let m = CoarseModel::new(cfg(16, 4, false), 1).unwrap();
    let x0 = vol(4, &mut rng, DomainTag::Hu);
    let views = Views::single(proj(16, ViewTag::Pa, &mut rng));
    assert!(matches!(coarse_loss(&m, &x0, &views, 3, &mut rng), Err(Error::Domain(_))));
}

fn fd_check(bi: bool, seed: u64) {
    let mut rng = SeededRng::new(seed, 0);
    let mut m = CoarseModel::new(cfg(16, 4, bi), seed).unwrap();
    let x0 = vol(4, &mut rng, DomainTag::NormalizedPm1);
    let pa = proj(16, ViewTag::Pa, &mut rng);
    let views = if bi { Views::bi_planar(pa, proj(16, ViewTag::Lateral, &mut rng)) } else { Views::single(pa) };
    let t = 6;
    let loss_at = |m: &CoarseModel| coarse_loss(m, &x0, &views, t, &mut SeededRng::new(77, 0)).unwrap();
    let (_, grads) = loss_at(&m);
    let ids: Vec<_> = m.params.iter().map(|(id, _)| id).collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, id) in ids.iter().enumerate() {
        let g = grads.get(*id).expect("every parameter reaches the loss");
        let len = g.len();
        let i = (k * 7919) % len;
        let orig = m.params.get(*id).value.data()[i];
        m.params.get_mut(*id).value.data_mut()[i] = orig + h;
        let (p, _) = loss_at(&m);
        m.params.get_mut(*id).value.data_mut()[i] = orig - h;
        let (q, _) = loss_at(&m);
        m.params.get_mut(*id).value.data_mut()[i] = orig;
        let num = (p - q) / (2.0 * h);
        let rel = (g[i] - num).abs() / g[i].abs().max(num.abs()).max(1e-6);
        worst = worst.max(rel);
        assert!(rel < 1e-3, "{}[{i}]: analytic {} numeric {num}", m.params.get(*id).name, g[i]);
    }
    assert!(worst < 1e-3);
}

#[test]
fn coarse_loss_gradients_match_finite_differences() {
    fd_check(false, 11);
}

#[test]
fn coarse_loss_gradients_match_finite_differences_biplanar() {
    fd_check(true, 12);
}

#[test]
fn one_step_moves_encoder_parameters() {
    let mut rng = SeededRng::new(13, 0);
    let mut m = CoarseModel::new(cfg(16, 4, true), 2).unwrap();
    let before: Vec<f64> = m
        .params
        .iter()
        .filter(|(_, p)| p.name.starts_with("encoder."))
        .flat_map(|(_, p)| p.value.data().to_vec())
        .collect();
    let x0 = vol(4, &mut rng, DomainTag::NormalizedPm1);
    let views = Views::bi_planar(proj(16, ViewTag::Pa, &mut rng), proj(16, ViewTag::Lateral, &mut rng));
    let mut opt = AdamState::new(&m.params, 1e-3);
    let loss = coarse_train_step(&mut m, &mut opt, &[CoarseSample { x0: &x0, views: &views }], &mut rng).unwrap();
    assert!(loss > 0.0);
    let after: Vec<f64> = m
        .params
        .iter()
        .filter(|(_, p)| p.name.starts_with("encoder."))
        .flat_map(|(_, p)| p.value.data().to_vec())
        .collect();
    assert!(before.iter().zip(&after).any(|(a, b)| a != b));
}

/// Builds the oracle residual `x_t − x_0` for a known `x_0`.
fn oracle(x0: Vec<f64>) -> impl FnMut(&[f64], usize) -> axon_core::Result<Vec<f64>> {
    move |x: &[f64], _t: usize| Ok(x.iter().zip(&x0).map(|(a, b)| a - b).collect())
}

#[test]
fn zero_predictor_single_step_returns_start() {
    let mut rng = SeededRng::new(14, 0);
    let s = BridgeSchedule::new(10, 1.0).unwrap();
    let xt: Vec<f64> = (0..27).map(|_| rng.normal()).collect();
    let plan = DdimPlan::new(vec![10], 0.0).unwrap();
    let out = bridge_sample_with(&xt, &s, &plan, &mut rng, |x, _| Ok(vec![0.0; x.len()])).unwrap();
    assert_eq!(out, xt);
}

#[test]
fn sampler_is_deterministic_for_fixed_seed() {
    let mut rng = SeededRng::new(15, 0);
    let m = CoarseModel::new(cfg(16, 4, false), 3).unwrap();
    let views = Views::single(proj(16, ViewTag::Pa, &mut rng));
    let plan = ddim_plan(10, 4, 0.5).unwrap();
    let a = bridge_sample(&m, &views, &plan, &mut SeededRng::new(9, 1)).unwrap();
    let b = bridge_sample(&m, &views, &plan, &mut SeededRng::new(9, 1)).unwrap();
    assert_eq!(a.data(), b.data());
    assert_eq!(a.dims(), [4, 4, 4]);
}

#[test]
fn sampler_rejects_mismatched_plan() {
    let mut rng = SeededRng::new(16, 0);
    let s = BridgeSchedule::new(10, 1.0).unwrap();
    let plan = DdimPlan::new(vec![1, 5], 0.0).unwrap();
    assert!(bridge_sample_with(&[0.0], &s, &plan, &mut rng, |x, _| Ok(x.to_vec())).is_err());
    assert!(DdimPlan::new(vec![], 0.0).is_err());
}

/// Posterior mean of `x_t − x_0` for scalar `x_0 ~ N(μ, σ²)` at a fixed end
/// point, by direct Gaussian conditioning.
fn gaussian_residual_oracle(xt: f64, x_end: f64, mu: f64, var: f64, alpha: f64, delta: f64) -> f64 {
    let a = 1.0 - alpha;
    let mean_xt = a * mu + alpha * x_end;
    let var_xt = a * a * var + delta;
    let post_x0 = mu + a * var / var_xt * (xt - mean_xt);
    xt - post_x0
}

/// Same quantity by quadrature over `x_0`, independent of the closed form.
fn quadrature_residual(xt: f64, x_end: f64, mu: f64, var: f64, alpha: f64, delta: f64) -> f64 {
    let sd = var.sqrt();
    let (lo, hi, n) = (mu - 10.0 * sd, mu + 10.0 * sd, 4000);
    let h = (hi - lo) / n as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..=n {
        let x0 = lo + i as f64 * h;
        let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        let prior = (-(x0 - mu).powi(2) / (2.0 * var)).exp();
        let m = (1.0 - alpha) * x0 + alpha * x_end;
        let like = (-(xt - m).powi(2) / (2.0 * delta)).exp();
        num += w * prior * like * (xt - x0);
        den += w * prior * like;
    }
    num / den
}

#[test]
fn gaussian_oracle_agrees_with_quadrature() {
    let s = BridgeSchedule::new(20, 1.0).unwrap();
    for t in [2, 7, 10, 15, 19] {
        for xt in [-1.0, -0.3, 0.0, 0.4, 1.2] {
            let (a, d) = (s.alpha(t), s.delta(t));
            let c = gaussian_residual_oracle(xt, 0.5, 0.1, 0.09, a, d);
            let q = quadrature_residual(xt, 0.5, 0.1, 0.09, a, d);
            assert!((c - q).abs() < 1e-9, "t={t} xt={xt}: {c} vs {q}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn oracle_sampler_recovers_x0(
        seed in 0u64..1000,
        t_max in 2usize..60,
        n_steps in 1usize..20,
        s_max in 0.1f64..2.0,
    ) {
        let mut rng = SeededRng::new(seed, 3);
        let s = BridgeSchedule::new(t_max, s_max).unwrap();
        let x0: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
        let xt: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
        let plan = ddim_plan(t_max, n_steps.min(t_max), 0.0).unwrap();
        let out = bridge_sample_with(&xt, &s, &plan, &mut rng, oracle(x0.clone())).unwrap();
        for (a, b) in out.iter().zip(&x0) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn oracle_sampler_recovers_x0_from_any_start(
        seed in 0u64..1000,
        start in -5.0f64..5.0,
        eta in 0.0f64..1.0,
    ) {
        // With the oracle, x̂_0 is exact from any state, so the final step
        // lands on x_0 even when the trajectory is stochastic.
        let mut rng = SeededRng::new(seed, 4);
        let s = BridgeSchedule::new(30, 1.0).unwrap();
        let x0: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let xt = vec![start; 8];
        let plan = ddim_plan(30, 6, eta).unwrap();
        let out = bridge_sample_with(&xt, &s, &plan, &mut rng, oracle(x0.clone())).unwrap();
        for (a, b) in out.iter().zip(&x0) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
