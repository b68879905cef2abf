use std::collections::BTreeSet;
use std::fs;

use axon_core::phantom::{
    assign_splits, generate_dataset, generate_phantom, render_views, Dataset, DatasetOptions, Jitter, PhantomSpec,
    Split, INFO_FILE, MANIFEST_FILE,
};
use axon_core::voxcore::encode_pgm16;
use axon_core::SeededRng;

fn still(n: usize) -> PhantomSpec {
    PhantomSpec {
        jitter: Jitter { position_mm: 0.0, lung_offset_mm: 0.0, scale: 0.0 },
        supersample: 1,
        ..PhantomSpec::toy(n)
    }
}

#[test]
fn zero_jitter_is_reproducible() {
    let s = still(16);
    let a = generate_phantom(&s, &mut SeededRng::new(1, 0)).unwrap();
    let b = generate_phantom(&s, &mut SeededRng::new(1, 0)).unwrap();
    assert_eq!(a.data(), b.data());
    // Without jitter even different seeds agree.
    let c = generate_phantom(&s, &mut SeededRng::new(2, 0)).unwrap();
    assert_eq!(a.data(), c.data());
}

#[test]
fn jittered_seeds_differ() {
    let s = PhantomSpec::toy(16);
    let a = generate_phantom(&s, &mut SeededRng::new(1, 0)).unwrap();
    let b = generate_phantom(&s, &mut SeededRng::new(2, 0)).unwrap();
    assert_ne!(a.data(), b.data());
}

#[test]
fn lung_centre_is_lung_and_materials_are_exact() {
    let s = still(32);
    let v = generate_phantom(&s, &mut SeededRng::new(1, 0)).unwrap();
    // Voxel whose center is nearest the right lung center.
    let c = s.lung_offsets[1];
    let idx = |k: usize| ((c[k] / s.spacing[k]) + s.dims[k] as f64 / 2.0 - 0.5).round() as usize;
    assert_eq!(v.get(idx(0), idx(1), idx(2)), s.hu_lung);
    assert_eq!(v.get(0, 0, 0), s.hu_air);
    assert_eq!(v.get(16, 16 + 6, 16), s.hu_body);
    let levels: BTreeSet<i64> = v.data().iter().map(|&x| x as i64).collect();
    let expect: BTreeSet<i64> = [s.hu_air, s.hu_body, s.hu_lung, s.hu_bone].iter().map(|&x| x as i64).collect();
    assert_eq!(levels, expect);
}

#[test]
fn supersampling_only_blends_boundaries() {
    let point = still(16);
    let blended = PhantomSpec { supersample: 3, ..point.clone() };
    let a = generate_phantom(&point, &mut SeededRng::new(1, 0)).unwrap();
    let b = generate_phantom(&blended, &mut SeededRng::new(1, 0)).unwrap();
    let n = 16;
    let mut interior = 0;
    for z in 1..n - 1 {
        for y in 1..n - 1 {
            for x in 1..n - 1 {
                let c = a.get(x, y, z);
                let uniform = (0..27).all(|k| a.get(x + k % 3 - 1, y + (k / 3) % 3 - 1, z + k / 9 - 1) == c);
                if uniform {
                    assert_eq!(b.get(x, y, z), c, "interior voxel ({x}, {y}, {z}) was blended");
                    interior += 1;
                }
            }
        }
    }
    assert!(interior > 100);
    assert!(b.data().iter().all(|&h| (point.hu_air..=point.hu_bone).contains(&h)));
    assert!(b.data().iter().any(|&h| ![point.hu_air, point.hu_body, point.hu_lung, point.hu_bone].contains(&h)));
}

#[test]
fn uncontainable_lungs_are_rejected() {
    let mut s = PhantomSpec::toy(16);
    s.lung_axes[0] = [80.0, 30.0, 40.0];
    assert!(generate_phantom(&s, &mut SeededRng::new(1, 0)).is_err());
    let mut s = PhantomSpec::toy(16);
    s.hu_bone = 5000.0;
    assert!(s.validate().is_err());
}

#[test]
fn split_rule_is_exact() {
    for (n, want) in [(100, (80, 10, 10)), (80, (64, 8, 8)), (10, (8, 1, 1))] {
        let ids: Vec<String> = (0..n).map(|i| format!("ph{i:05}")).collect();
        let s = assign_splits(&ids);
        let count = |k: Split| s.iter().filter(|&&x| x == k).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), want);
        assert_eq!(s, assign_splits(&ids));
    }
}

fn opts() -> DatasetOptions {
    DatasetOptions { sid_mm: 1000.0, proj_size: 32, lateral: true }
}

#[test]
fn dataset_files_manifest_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let spec = PhantomSpec { seed: 7, ..PhantomSpec::toy(8) };
    let recs = generate_dataset(&spec, 10, &a, &opts()).unwrap();
    generate_dataset(&spec, 10, &b, &opts()).unwrap();
    let ids: BTreeSet<_> = recs.iter().map(|r| r.id.clone()).collect();
    assert_eq!(ids.len(), 10);
    let vols = fs::read_dir(&a).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "vvol").count();
    let pgms = fs::read_dir(&a).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "pgm").count();
    assert_eq!(vols, 10);
    assert_eq!(pgms, 20);
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
    assert!(a.join(MANIFEST_FILE).exists() && a.join(INFO_FILE).exists());
}

#[test]
fn stored_projections_rerender_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let spec = PhantomSpec { seed: 3, ..PhantomSpec::toy(8) };
    generate_dataset(&spec, 3, dir.path(), &opts()).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    for rec in &ds.records {
        let s = ds.load(rec).unwrap();
        let (pa, lat) = render_views(&s.volume, &ds.info).unwrap();
        assert_eq!(encode_pgm16(&pa).unwrap(), fs::read(dir.path().join(&rec.pa_path)).unwrap());
        let lat_path = rec.lateral_path.as_ref().unwrap();
        assert_eq!(encode_pgm16(&lat.unwrap()).unwrap(), fs::read(dir.path().join(lat_path)).unwrap());
        assert_eq!(s.pa.dims(), [32, 32]);
    }
}

#[test]
fn unwritable_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain");
    fs::write(&file, b"x").unwrap();
    assert!(generate_dataset(&PhantomSpec::toy(8), 1, &file.join("sub"), &opts()).is_err());
}
