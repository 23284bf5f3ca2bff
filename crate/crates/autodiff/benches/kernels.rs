use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use panogen_autodiff::kernels::{gemm_nn, im2col, ConvGeom};
use panogen_autodiff::{parallel, Conv2dSpec, Precision, Tape, Tensor};

fn modes() -> [(&'static str, bool); 2] {
    [("sequential", false), ("parallel", true)]
}

fn gemm(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm_nn_128");
    let n = 128;
    let a: Vec<f64> = (0..n * n).map(|i| (i as f64 * 0.01).sin()).collect();
    let b: Vec<f64> = (0..n * n).map(|i| (i as f64 * 0.02).cos()).collect();
    for (name, on) in modes() {
        parallel::set_enabled(on);
        group.bench_function(BenchmarkId::from_parameter(name), |bch| {
            bch.iter(|| gemm_nn(n, n, n, &a, &b))
        });
    }
    parallel::set_enabled(true);
    group.finish();
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_fwd_bwd_16x32x64");
    let x = Tensor::new(&[16, 32, 64], (0..16 * 32 * 64).map(|i| (i as f64).sin()).collect()).unwrap();
    let w = Tensor::new(&[16, 16, 3, 3], (0..16 * 16 * 9).map(|i| (i as f64).cos() * 0.1).collect()).unwrap();
    for (name, on) in modes() {
        parallel::set_enabled(on);
        group.bench_function(BenchmarkId::from_parameter(name), |bch| {
            bch.iter(|| {
                let mut t = Tape::new(Precision::F32);
                let xv = t.input(x.clone());
                let wv = t.input(w.clone());
                let spec = Conv2dSpec { stride: 1, pad: 1, circular_w: true };
                let y = t.conv2d(xv, wv, None, spec).unwrap();
                let l = t.mean(y);
                t.backward(l).unwrap()
            })
        });
    }
    parallel::set_enabled(true);
    group.finish();
}

fn unfold(c: &mut Criterion) {
    let mut group = c.benchmark_group("im2col_32x128x128");
    let g = ConvGeom { in_c: 32, in_h: 128, in_w: 128, k: 3, stride: 1, pad: 1, circular_w: false };
    let x: Vec<f64> = (0..32 * 128 * 128).map(|i| i as f64).collect();
    for (name, on) in modes() {
        parallel::set_enabled(on);
        group.bench_function(BenchmarkId::from_parameter(name), |bch| bch.iter(|| im2col(&g, &x)));
    }
    parallel::set_enabled(true);
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = gemm, conv, unfold
}
criterion_main!(benches);
