use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::Vector3;
use radsplat::{compute_loss, splat_backward, splat_forward, RasterConfig};
use radsplat_bench::fixture;

fn rasterizer(c: &mut Criterion) {
    let mut group = c.benchmark_group("splat");
    group.sample_size(20);
    for m in [1000, 4000] {
        let (model, g) = fixture(m);
        let kernels = model.kernels.activate_all().unwrap();
        let rho = vec![0.02f32; m];
        let frame = g.frame(40).unwrap();
        let cfg = RasterConfig::default();
        group.bench_with_input(BenchmarkId::new("forward", m), &m, |b, _| {
            b.iter(|| splat_forward(black_box(&kernels), &rho, &g, &frame, &cfg).unwrap())
        });
        let fwd = splat_forward(&kernels, &rho, &g, &frame, &cfg).unwrap();
        let target = vec![0.01f32; fwd.values.len()];
        let (_, d) = compute_loss(&fwd.values, &target, g.rows, g.cols, 0.2).unwrap();
        group.bench_with_input(BenchmarkId::new("backward", m), &m, |b, _| {
            b.iter(|| splat_backward(black_box(&kernels), &rho, &g, &fwd, &d).unwrap())
        });
    }
    group.finish();
}

fn network(c: &mut Criterion) {
    let mut group = c.benchmark_group("dnaf");
    group.sample_size(20);
    let m = 4000;
    let (model, _) = fixture(m);
    let pos: Vec<Vector3<f32>> = (0..m).map(|i| model.kernels.position(i)).collect();
    let ts = vec![0.5f32; m];
    group.bench_function("forward_4000", |b| b.iter(|| model.dnaf.forward_batch(black_box(&pos), &ts).unwrap()));
    let (_, cache) = model.dnaf.forward_batch(&pos, &ts).unwrap();
    let up = vec![1e-3f32; m];
    group.bench_function("backward_4000", |b| b.iter(|| model.dnaf.backward(black_box(&cache), &up, true).unwrap()));
    group.finish();
}

criterion_group!(benches, rasterizer, network);
criterion_main!(benches);
