use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use pgsgan_core::metrics::{fid, FeatureExtractor};
use pgsgan_core::nn::{Conv2d, Float, Module, Tensor4};
use pgsgan_core::{canny, CannyParams, FibState, Generator, GeneratorConfig, ImageTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: [usize; 4], seed: u64) -> Tensor4 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor4::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0) as Float).collect()).unwrap()
}

fn noise_image(seed: u64, size: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::from_vec(1, size, size, (0..size * size).map(|_| rng.random::<f32>()).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = c.benchmark_group("conv2d");
    for (name, cin, cout, k, s, size) in [
        ("3x3 16->32 s2 @32", 16, 32, 3, 2, 32),
        ("3x3 64->64 s1 @8", 64, 64, 3, 1, 8),
        ("4x4 32->64 s2 @32", 32, 64, 4, 2, 32),
    ] {
        let mut layer = Conv2d::new("c", cin, cout, k, s, 1, &mut rng);
        let x = random([4, cin, size, size], 2);
        g.bench_function(format!("{name} infer"), |b| b.iter(|| layer.infer(black_box(&x)).unwrap()));
        g.bench_function(format!("{name} forward+backward"), |b| {
            b.iter(|| {
                let y = layer.forward(black_box(&x)).unwrap();
                layer.backward(&y).unwrap()
            })
        });
    }
    g.finish();
}

fn edges(c: &mut Criterion) {
    let p = CannyParams::default();
    let img = noise_image(3, 64);
    c.bench_function("canny 64x64", |b| b.iter(|| canny(black_box(&img), &p).unwrap()));
}

fn frechet(c: &mut Criterion) {
    let extractor = FeatureExtractor::new(42);
    let imgs: Vec<ImageTensor> = (0..33).map(|s| noise_image(s, 64)).collect();
    let refs: Vec<&ImageTensor> = imgs.iter().collect();
    c.bench_function("features 33 images 64x64", |b| b.iter(|| extractor.features(black_box(&refs)).unwrap()));
    let a = extractor.features(&refs).unwrap();
    let other: Vec<ImageTensor> = (100..133).map(|s| noise_image(s, 64)).collect();
    let f = extractor.features(&other.iter().collect::<Vec<_>>()).unwrap();
    c.bench_function("fid 33 x 64-d", |b| b.iter(|| fid(black_box(&a), black_box(&f)).unwrap()));
}

fn generator(c: &mut Criterion) {
    let base = Generator::new(GeneratorConfig::default(), 5).unwrap();
    let mut grown = base.clone();
    grown.grow(FibState::generator(), 6).unwrap();
    let x32 = random([1, 3, 32, 32], 7);
    let x64 = random([1, 3, 64, 64], 8);
    c.bench_function("generator infer 32x32", |b| b.iter(|| base.infer(black_box(&x32)).unwrap()));
    c.bench_function("generator infer 64x64 grown", |b| b.iter(|| grown.infer(black_box(&x64)).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = conv, edges, frechet, generator
}
criterion_main!(benches);
