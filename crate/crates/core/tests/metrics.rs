use axon_core::metrics::{
    evaluate_batch, mae, mse, psnr, psnr_from_mse, ssim3d, to_unit_range, MetricReport, MetricValues, SampleMetrics,
};
use axon_core::{DomainTag, Error, SeededRng, Volume};
use proptest::prelude::*;

fn unit(dims: [usize; 3], rng: &mut SeededRng) -> Volume {
    let n = dims.iter().product();
    Volume::from_data(dims, [1.0; 3], (0..n).map(|_| rng.uniform()).collect(), DomainTag::Normalized01).unwrap()
}

fn at(v: &Volume, x: usize, y: usize, z: usize) -> f64 {
    let [dx, dy, _] = v.dims();
    v.data()[x + dx * (y + dy * z)]
}

/// Direct window loop: every 7³ block, moments from scratch.
fn brute_ssim(a: &Volume, b: &Volume) -> f64 {
    let [dx, dy, dz] = a.dims();
    let w = 7;
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for z0 in 0..=dz - w {
        for y0 in 0..=dy - w {
            for x0 in 0..=dx - w {
                let mut pa = Vec::new();
                let mut pb = Vec::new();
                for z in z0..z0 + w {
                    for y in y0..y0 + w {
                        for x in x0..x0 + w {
                            pa.push(at(a, x, y, z));
                            pb.push(at(b, x, y, z));
                        }
                    }
                }
                let n = pa.len() as f64;
                let ma = pa.iter().sum::<f64>() / n;
                let mb = pb.iter().sum::<f64>() / n;
                let va = pa.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / n;
                let vb = pb.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / n;
                let cov = pa.iter().zip(&pb).map(|(p, q)| (p - ma) * (q - mb)).sum::<f64>() / n;
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

#[test]
fn basic_examples() {
    let mut rng = SeededRng::new(1, 0);
    let a = unit([5, 4, 3], &mut rng);
    assert_eq!(mae(&a, &a).unwrap(), 0.0);
    assert_eq!(mse(&a, &a).unwrap(), 0.0);
    assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    let b = Volume::from_data([2, 2, 2], [1.0; 3], vec![0.3; 8], DomainTag::Normalized01).unwrap();
    let c = Volume::from_data([2, 2, 2], [1.0; 3], vec![0.4; 8], DomainTag::Normalized01).unwrap();
    assert!((mae(&b, &c).unwrap() - 0.1).abs() < 1e-15);
    assert!((mse(&b, &c).unwrap() - 0.01).abs() < 1e-15);
    assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
    assert!((psnr_from_mse(0.0078) - 21.079).abs() < 1e-3);
}

#[test]
fn domain_and_shape_errors() {
    let mut rng = SeededRng::new(2, 0);
    let a = unit([4, 4, 4], &mut rng);
    let b = unit([4, 4, 5], &mut rng);
    assert!(matches!(mae(&a, &b), Err(Error::Shape(_))));
    let hu = Volume::new([4; 3], [1.0; 3], 0.0).unwrap();
    assert!(matches!(mse(&a, &hu), Err(Error::Domain(_))));
    assert!(ssim3d(&a, &a).is_err());
    assert!(evaluate_batch(&[]).is_err());
}

#[test]
fn mae_mse_match_naive_loops() {
    let mut rng = SeededRng::new(3, 0);
    let a = unit([6, 5, 4], &mut rng);
    let b = unit([6, 5, 4], &mut rng);
    let (mut s1, mut s2) = (0.0, 0.0);
    for z in 0..4 {
        for y in 0..5 {
            for x in 0..6 {
                let d = at(&a, x, y, z) - at(&b, x, y, z);
                s1 += d.abs();
                s2 += d * d;
            }
        }
    }
    assert!((mae(&a, &b).unwrap() - s1 / 120.0).abs() < 1e-12);
    assert!((mse(&a, &b).unwrap() - s2 / 120.0).abs() < 1e-12);
}

#[test]
fn ssim_matches_window_loop() {
    let mut rng = SeededRng::new(4, 0);
    let a = unit([12, 12, 12], &mut rng);
    let noise: Vec<f64> = a.data().iter().map(|v| (v * 0.6 + 0.4 * rng.uniform()).clamp(0.0, 1.0)).collect();
    let b = Volume::from_data([12; 3], [1.0; 3], noise, DomainTag::Normalized01).unwrap();
    let fast = ssim3d(&a, &b).unwrap();
    let slow = brute_ssim(&a, &b);
    assert!((fast - slow).abs() < 1e-10, "{fast} vs {slow}");
    let c = unit([9, 8, 7], &mut rng);
    let d = unit([9, 8, 7], &mut rng);
    assert!((ssim3d(&c, &d).unwrap() - brute_ssim(&c, &d)).abs() < 1e-10);
}

#[test]
fn ssim_examples() {
    let mut rng = SeededRng::new(5, 0);
    let a = unit([8, 8, 8], &mut rng);
    assert_eq!(ssim3d(&a, &a).unwrap(), 1.0);
    let bin = a.map(DomainTag::Normalized01, |v| if v > 0.5 { 1.0 } else { 0.0 }).unwrap();
    let inv = bin.map(DomainTag::Normalized01, |v| 1.0 - v).unwrap();
    assert!(ssim3d(&bin, &inv).unwrap() < 0.0);
}

/// Published (MSE, PSNR) pairs of the full method on four test sets.
const REPORTED: [(f64, f64); 4] = [(0.0096, 20.30), (0.0078, 21.21), (0.0099, 20.15), (0.0077, 21.24)];

#[test]
fn psnr_convention_matches_reported_rows() {
    for (m, reported) in REPORTED {
        let p = psnr_from_mse(m);
        assert!((p - reported).abs() < 0.5, "mse {m}: {p} vs {reported}");
        // A peak of 2 (the [-1, 1] range) would be far off.
        assert!((10.0 * (4.0 / m).log10() - reported).abs() > 5.0);
    }
}

#[test]
fn unit_range_conversion_clamps() {
    let v = Volume::from_data([3, 1, 1], [1.0; 3], vec![-1.5, 0.0, 1.0], DomainTag::Hu).unwrap();
    let u = to_unit_range(&v).unwrap();
    assert_eq!(u.data(), &[0.0, 0.5, 1.0]);
    assert_eq!(u.domain(), DomainTag::Normalized01);
}

fn sample(id: &str, psnr: f64) -> SampleMetrics {
    SampleMetrics { id: id.into(), values: MetricValues { mae: 0.1, mse: 0.01, psnr, ssim: 0.5 } }
}

#[test]
fn report_aggregation() {
    let one = MetricReport::from_samples(vec![sample("a", 20.0)]).unwrap();
    assert_eq!(one.std.psnr, 0.0);
    let two = MetricReport::from_samples(vec![sample("a", 20.0), sample("b", 22.0)]).unwrap();
    assert_eq!(two.mean.psnr, 21.0);
    assert_eq!(two.std.psnr, 1.0);
}

#[test]
fn jsonl_round_trip() {
    let mut rng = SeededRng::new(6, 0);
    let pairs: Vec<(String, Volume, Volume)> = (0..3)
        .map(|i| {
            let a = unit([8; 3], &mut rng);
            let b = if i == 1 { a.clone() } else { unit([8; 3], &mut rng) };
            (format!("s{i}"), a, b)
        })
        .collect();
    let r = evaluate_batch(&pairs).unwrap();
    assert_eq!(r.per_sample[1].values.psnr, f64::INFINITY);
    let text = r.to_jsonl().unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().last().unwrap().contains("\"summary\":true"));
    let back = MetricReport::from_jsonl(&text).unwrap();
    assert_eq!(back, r);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn metrics_are_symmetric_and_bounded(seed in 0u64..10_000) {
        let mut rng = SeededRng::new(seed, 7);
        let a = unit([8, 7, 7], &mut rng);
        let b = unit([8, 7, 7], &mut rng);
        prop_assert_eq!(mae(&a, &b).unwrap(), mae(&b, &a).unwrap());
        prop_assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
        let (s, t) = (ssim3d(&a, &b).unwrap(), ssim3d(&b, &a).unwrap());
        prop_assert!((s - t).abs() < 1e-14);
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((ssim3d(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_decreases_with_mse(m in 1e-8f64..10.0, k in 1.0001f64..100.0) {
        prop_assert!(psnr_from_mse(m * k) < psnr_from_mse(m));
    }
}
