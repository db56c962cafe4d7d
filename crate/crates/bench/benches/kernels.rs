use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use jointdiff::denoiser::{Denoiser, DenoiserConfig};
use jointdiff::net::Init;
use jointdiff::numerics::{conv2d, dft2, gaussian};
use jointdiff::schedule::NoiseSchedule;
use jointdiff::{Rng, Tensor};

fn bench_conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d");
    for &(ch, n) in &[(8usize, 32usize), (16, 32), (32, 32)] {
        let mut rng = Rng::new(1);
        let x: Tensor<f32> = gaussian(&mut rng, &[ch, n, n]);
        let k: Tensor<f32> = gaussian(&mut rng, &[ch, ch, 3, 3]);
        let b: Tensor<f32> = Tensor::zeros(&[ch]);
        g.bench_with_input(BenchmarkId::from_parameter(format!("{ch}x{n}x{n}")), &(), |bench, _| {
            bench.iter(|| conv2d(black_box(&x), &k, &b).unwrap())
        });
    }
    g.finish();
}

fn bench_denoiser(c: &mut Criterion) {
    let sched = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
    let mut g = c.benchmark_group("denoiser");
    for &width in &[8usize, 16] {
        let cfg = DenoiserConfig {
            num_classes: 5,
            width,
            embed_dim: 32,
        };
        let model = Denoiser::<f32>::new(cfg, &mut Rng::new(2), Init::default()).unwrap();
        let stack: Tensor<f32> = gaussian(&mut Rng::new(3), &[6, 32, 32]);
        g.bench_with_input(BenchmarkId::new("forward", width), &(), |bench, _| {
            bench.iter(|| model.forward(black_box(&stack), 100, &sched).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("forward_backward", width), &(), |bench, _| {
            bench.iter(|| {
                let mut grads = model.params().zeros_like();
                let (x, y, tape) = model.forward_with_tape(black_box(&stack), 100, &sched).unwrap();
                model.backward(tape, &x, &y, &mut grads).unwrap();
                grads
            })
        });
    }
    g.finish();
}

fn bench_dft(c: &mut Criterion) {
    let mut g = c.benchmark_group("dft2");
    for &n in &[16usize, 32, 64] {
        let x: Tensor<f64> = gaussian(&mut Rng::new(4), &[n, n]);
        g.bench_with_input(BenchmarkId::from_parameter(n), &(), |bench, _| {
            bench.iter(|| dft2(black_box(&x)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_conv, bench_denoiser, bench_dft);
criterion_main!(benches);
