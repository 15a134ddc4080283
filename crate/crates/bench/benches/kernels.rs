use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use dualskip_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_values(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("conv3x3");
    for &(channels, size) in &[(16usize, 64usize), (64, 32)] {
        let x = random(&[2, channels, size, size], &mut rng);
        let w = random(&[channels, channels, 3, 3], &mut rng);
        let b = random(&[channels], &mut rng);
        let id = format!("{channels}ch_{size}px");
        group.bench_function(BenchmarkId::new("forward", &id), |bench| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (x, w, b) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
                black_box(tape.conv2d(x, w, Some(b), 1, 1).unwrap());
            })
        });
        let weights: Vec<f32> = (0..2 * channels * size * size).map(|_| rng.gen()).collect();
        group.bench_function(BenchmarkId::new("forward_backward", &id), |bench| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (x, w, b) = (tape.leaf(x.clone(), true), tape.leaf(w.clone(), true), tape.leaf(b.clone(), true));
                let y = tape.conv2d(x, w, Some(b), 1, 1).unwrap();
                let loss = tape.weighted_sum(y, &weights).unwrap();
                black_box(tape.backward(loss).unwrap());
            })
        });
    }
    group.finish();
}

fn resampling(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[2, 32, 64, 64], &mut rng);
    c.bench_function("max_pool_2x2", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let v = tape.constant(x.clone());
            black_box(tape.max_pool(v, 2).unwrap());
        })
    });
    let small = random(&[2, 32, 16, 16], &mut rng);
    c.bench_function("upsample_x4", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let v = tape.constant(small.clone());
            black_box(tape.upsample(v, 4).unwrap());
        })
    });
}

criterion_group!(benches, conv, resampling);
criterion_main!(benches);
