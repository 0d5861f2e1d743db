use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mmgs_core::gaussians::{num_bases, Camera, GaussianSet};
use mmgs_core::linalg;
use mmgs_core::rasterizer::{rasterize, render, GaussianTensors, RasterOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scene(count: usize, size: u32) -> (GaussianSet<f32>, Camera) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = size as f64 * 0.95;
    let c = (size as f64 - 1.0) / 2.0;
    let cam = Camera::new(0, [[f, 0.0, c], [0.0, f, c], [0.0, 0.0, 1.0]], linalg::identity(), [0.0; 3], size, size).unwrap();
    let mut set = GaussianSet::empty(1);
    for _ in 0..count {
        let z: f32 = rng.gen_range(1.5..4.0);
        set.centers.push([rng.gen_range(-0.45..0.45) * z, rng.gen_range(-0.45..0.45) * z, z]);
        set.sh.extend((0..num_bases(1) * 3).map(|_| rng.gen_range(-0.5f32..0.5)));
        set.opacity_logit.push(rng.gen_range(-2.0..3.0));
        let q: [f32; 4] = [rng.gen_range(0.1..1.0), rng.gen(), rng.gen(), rng.gen()];
        let n = linalg::quat_norm(q);
        set.rotation.push(q.map(|v| v / n));
        set.log_scale.push(std::array::from_fn(|_| rng.gen_range(-5.0f32..-3.5)));
    }
    (set, cam)
}

fn forward(c: &mut Criterion) {
    let (set, cam) = scene(20_000, 256);
    let mut group = c.benchmark_group("rasterize_256_20k");
    group.sample_size(10);
    for threads in [1, 4] {
        let opts = RasterOptions::default().with_threads(threads);
        group.bench_with_input(BenchmarkId::from_parameter(threads), &opts, |b, opts| {
            b.iter(|| rasterize(&set, &cam, [0.0; 3], opts).unwrap())
        });
    }
    group.finish();
}

fn backward(c: &mut Criterion) {
    let (set, cam) = scene(2_000, 64);
    let mut group = c.benchmark_group("render_backward_64_2k");
    for threads in [1, 4] {
        let opts = RasterOptions::default().with_threads(threads);
        group.bench_with_input(BenchmarkId::from_parameter(threads), &opts, |b, opts| {
            b.iter(|| {
                let g = GaussianTensors::from_set(&set, true);
                render(&g, &cam, [0.0; 3], opts).unwrap().image.sum().backward().unwrap();
            })
        });
    }
    group.finish();
}

criterion_group!(benches, forward, backward);
criterion_main!(benches);
