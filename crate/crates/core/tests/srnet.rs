use axon_core::nnet::gradcheck::{check_params, DEFAULT_FLOOR, DEFAULT_STEP};
use axon_core::nnet::{AdamState, Tape, Tensor};
use axon_core::preprocess::rescale_to_grid;
use axon_core::srnet::{sr_forward, sr_loss, train_sr, SrConfig, SrModel, SrPair};
use axon_core::{DomainTag, Error, SeededRng, Volume};
use proptest::prelude::*;

fn vol(dims: [usize; 3], rng: &mut SeededRng) -> Volume {
    let n = dims.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    Volume::from_data(dims, [2.0, 2.0, 3.0], data, DomainTag::NormalizedPm1).unwrap()
}

/// Smooth field sampled on a grid, so the low/high pair is consistent.
fn smooth(n: usize, phase: f64) -> Volume {
    let mut data = Vec::with_capacity(n * n * n);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let p = |i: usize| (i as f64 + 0.5) / n as f64;
                let v = 0.6 * (3.0 * p(x) + phase).sin() * (2.0 * p(y) - phase).cos() + 0.3 * (4.0 * p(z)).sin();
                data.push(v);
            }
        }
    }
    Volume::from_data([n; 3], [16.0 / n as f64; 3], data, DomainTag::NormalizedPm1).unwrap()
}

#[test]
fn toy_shape_contract_and_extent() {
    let m = SrModel::new(SrConfig::toy(), 1).unwrap();
    let v = vol([8, 8, 8], &mut SeededRng::new(1, 0));
    let out = sr_forward(&m, &v).unwrap();
    assert_eq!(out.dims(), [16, 16, 16]);
    for a in 0..3 {
        assert!((out.extent()[a] - v.extent()[a]).abs() < 1e-9);
    }
}

#[test]
fn gamma_other_than_two_is_rejected() {
    for g in [0, 1, 3, 4] {
        let c = SrConfig { gamma: g, ..SrConfig::toy() };
        assert!(matches!(SrModel::new(c, 1), Err(Error::InvalidArgument(_))));
    }
    assert!(SrModel::new(SrConfig { n_rrdb: 0, ..SrConfig::toy() }, 1).is_err());
}

#[test]
fn slices_are_processed_independently() {
    let m = SrModel::new(SrConfig::toy(), 2).unwrap();
    let mut rng = SeededRng::new(2, 0);
    let x = Tensor::randn(&[5, 1, 6, 6], 1.0, &mut rng);
    let mut zeroed = x.clone();
    let k = 2;
    zeroed.data_mut()[k * 36..(k + 1) * 36].fill(0.0);
    let run = |t: Tensor| {
        let mut tape = Tape::new(&m.params);
        let v = tape.input(t);
        let y = m.slice_forward(&mut tape, v).unwrap();
        tape.value(y).to_vec()
    };
    let (a, b) = (run(x), run(zeroed));
    let per = 144;
    for s in 0..5 {
        let same = a[s * per..(s + 1) * per] == b[s * per..(s + 1) * per];
        assert_eq!(same, s != k, "slice {s}");
    }
}

#[test]
fn sr_rejects_bad_inputs() {
    let m = SrModel::new(SrConfig::toy(), 1).unwrap();
    let mut rng = SeededRng::new(3, 0);
    let low = vol([4, 4, 4], &mut rng);
    let wrong = vol([8, 8, 6], &mut rng);
    assert!(sr_loss(&m, &low, &wrong).is_err());
    let hu = Volume::new([4; 3], [1.0; 3], 100.0).unwrap();
    assert!(matches!(sr_forward(&m, &hu), Err(Error::Domain(_))));
    let mut m = m;
    let mut opt = AdamState::new(&m.params, 1e-3);
    assert!(train_sr(&mut m, &[], &mut opt, 1, false, &mut rng).is_err());
    let pair = SrPair { high: vol([8; 3], &mut rng), downsampled: low, synthetic: None };
    assert!(train_sr(&mut m, &[pair], &mut opt, 1, true, &mut rng).is_err());
}

#[test]
fn sr_network_gradcheck() {
    let mut m = SrModel::new(SrConfig { n_rrdb: 1, base_features: 4, gamma: 2 }, 4).unwrap();
    let mut rng = SeededRng::new(4, 0);
    let x = Tensor::randn(&[1, 1, 3, 4, 4], 1.0, &mut rng);
    let target = Tensor::randn(&[1, 1, 6, 8, 8], 1.0, &mut rng);
    let model = SrModel::new(SrConfig { n_rrdb: 1, base_features: 4, gamma: 2 }, 4).unwrap();
    let report = check_params(&mut m.params, 40, DEFAULT_STEP, DEFAULT_FLOOR, &mut rng, |tape| {
        let xv = tape.input(x.clone());
        let y = model.forward_tape(tape, xv)?;
        let t = tape.input(target.clone());
        tape.mse(y, t)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn identity_task_training_reduces_loss() {
    let mut m = SrModel::new(SrConfig::toy(), 5).unwrap();
    let mut rng = SeededRng::new(5, 0);
    let pairs: Vec<SrPair> = (0..4)
        .map(|i| {
            let low = smooth(4, i as f64 * 0.7);
            let high = rescale_to_grid(&low, [8; 3]).unwrap();
            SrPair { high, downsampled: low, synthetic: None }
        })
        .collect();
    let mut opt = AdamState::new(&m.params, 2e-3);
    let trace = train_sr(&mut m, &pairs, &mut opt, 75, false, &mut rng).unwrap();
    assert_eq!(trace.len(), 300);
    let head = trace[..4].iter().sum::<f64>() / 4.0;
    let tail = trace[296..].iter().sum::<f64>() / 4.0;
    assert!(tail <= 0.3 * head, "first {head}, last {tail}");
}

#[test]
fn training_is_deterministic() {
    let mut rng = SeededRng::new(6, 0);
    let low = vol([4; 3], &mut rng);
    let high = vol([8; 3], &mut rng);
    let pairs = vec![SrPair { high, downsampled: low, synthetic: None }];
    let run = || {
        let mut m = SrModel::new(SrConfig::toy(), 6).unwrap();
        let mut opt = AdamState::new(&m.params, 1e-3);
        train_sr(&mut m, &pairs, &mut opt, 5, false, &mut SeededRng::new(1, 1)).unwrap()
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn shape_contract_holds(x in 1usize..6, y in 1usize..6, z in 1usize..6, seed in 0u64..100) {
        let m = SrModel::new(SrConfig { n_rrdb: 1, base_features: 4, gamma: 2 }, seed).unwrap();
        let v = vol([x, y, z], &mut SeededRng::new(seed, 1));
        let out = sr_forward(&m, &v).unwrap();
        prop_assert_eq!(out.dims(), [2 * x, 2 * y, 2 * z]);
        prop_assert_eq!(out.spacing(), [1.0, 1.0, 1.5]);
    }
}
