use std::hint::black_box;

use axon_core::metrics::ssim3d;
use axon_core::nnet::{ParamStore, Tape, Tensor, UNet3d, UNetConfig};
use axon_core::phantom::{generate_phantom, PhantomSpec};
use axon_core::projector::{default_geometries, hu_to_attenuation, render_drr};
use axon_core::{DomainTag, SeededRng, Volume};
use criterion::{criterion_group, criterion_main, Criterion};

fn conv3d(c: &mut Criterion) {
    let mut rng = SeededRng::new(1, 0);
    let x = Tensor::randn(&[1, 8, 16, 16, 16], 1.0, &mut rng);
    let w = Tensor::randn(&[8, 8, 3, 3, 3], 0.1, &mut rng);
    let store = ParamStore::new();
    c.bench_function("conv3d 8→8 ch, 16³, k3", |b| {
        b.iter(|| {
            let mut tape = Tape::new(&store);
            let (xv, wv) = (tape.input(x.clone()), tape.input(w.clone()));
            black_box(tape.conv3d(xv, wv, None, [1; 3], [1; 3]).unwrap());
        })
    });
}

fn drr(c: &mut Criterion) {
    let spec = PhantomSpec::toy(32);
    let hu = generate_phantom(&spec, &mut SeededRng::new(2, 0)).unwrap();
    let av = hu_to_attenuation(&hu).unwrap();
    let (pa, _) = default_geometries(&hu, 1000.0, 64).unwrap();
    c.bench_function("render_drr 32³ → 64²", |b| b.iter(|| black_box(render_drr(&av, &pa).unwrap())));
}

fn ssim(c: &mut Criterion) {
    let mut rng = SeededRng::new(3, 0);
    let mut unit = || {
        let data = (0..32 * 32 * 32).map(|_| rng.uniform()).collect();
        Volume::from_data([32; 3], [1.0; 3], data, DomainTag::Normalized01).unwrap()
    };
    let (a, b) = (unit(), unit());
    c.bench_function("ssim3d 32³", |bench| bench.iter(|| black_box(ssim3d(&a, &b).unwrap())));
}

fn unet(c: &mut Criterion) {
    let mut store = ParamStore::new();
    let mut rng = SeededRng::new(4, 0);
    let net = UNet3d::build(&mut store, "net", UNetConfig::toy(1, 0, 1), &mut rng).unwrap();
    let x = Tensor::randn(&[1, 1, 8, 8, 8], 1.0, &mut rng);
    c.bench_function("toy U-Net forward 8³", |b| {
        b.iter(|| {
            let mut tape = Tape::new(&store);
            let xv = tape.input(x.clone());
            black_box(net.forward(&mut tape, xv, None, &[10.0]).unwrap());
        })
    });
}

criterion_group!(benches, conv3d, drr, ssim, unet);
criterion_main!(benches);
