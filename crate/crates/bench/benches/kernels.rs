//! Criterion timings of each convolution kernel and of the im2win tiled
//! kernel's ablation variants on a few of the built-in layers.
//!
//! `cargo bench -p im2win-bench` runs everything; the CLI's `bench` and
//! `ablate` subcommands produce the best-of-R CSV reports instead.

use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use im2win_core::bench::{find_benchmark, Algorithm, BenchConfig, Variant};
use im2win_core::optimized::{default_plan_for, im2win_opt_compute};
use im2win_core::{
    conv_direct, conv_im2col_gemm, conv_im2win_basic, conv_im2win_opt, conv_implicit_gemm, im2win,
};

const LAYERS: [&str; 3] = ["conv5", "conv6", "conv12"];
const BATCH: usize = 2;

fn kernels(c: &mut Criterion) {
    for name in LAYERS {
        let cfg =
            BenchConfig::new(find_benchmark(name).unwrap(), Algorithm::Direct).with_batch(BATCH);
        let shape = cfg.shape().unwrap();
        let p = shape.params();
        let (input, filter) = cfg.operands().unwrap();
        let plan = default_plan_for(&shape);

        let mut group = c.benchmark_group(format!("kernels/{name}"));
        group.throughput(Throughput::Elements(shape.flops()));
        for alg in Algorithm::ALL {
            group.bench_function(BenchmarkId::from_parameter(alg), |b| {
                b.iter(|| match alg {
                    Algorithm::Direct => conv_direct(&input, &filter, &p),
                    Algorithm::Im2colGemm => conv_im2col_gemm(&input, &filter, &p),
                    Algorithm::ImplicitGemm => conv_implicit_gemm(&input, &filter, &p),
                    Algorithm::Im2winBasic => conv_im2win_basic(&input, &filter, &p),
                    Algorithm::Im2winOpt => conv_im2win_opt(&input, &filter, &p, &plan),
                })
            });
        }
        group.finish();
    }
}

fn ablation(c: &mut Criterion) {
    for name in LAYERS {
        let cfg =
            BenchConfig::new(find_benchmark(name).unwrap(), Algorithm::Im2winOpt).with_batch(BATCH);
        let shape = cfg.shape().unwrap();
        let (input, filter) = cfg.operands().unwrap();
        let win = im2win(&input, &shape.params()).unwrap();
        let base = default_plan_for(&shape);

        // Compute phase only; the transform is shared by every variant.
        let mut group = c.benchmark_group(format!("ablation/{name}"));
        group.throughput(Throughput::Elements(shape.flops()));
        for v in Variant::ABLATION {
            let plan = base.with_toggles(v.apply(base.toggles));
            group.bench_function(BenchmarkId::from_parameter(v.name()), |b| {
                b.iter(|| im2win_opt_compute(&win, &filter, &plan))
            });
        }
        group.finish();
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default()
        .sample_size(10)
        .warm_up_time(Duration::from_millis(500))
        .measurement_time(Duration::from_secs(3));
    targets = kernels, ablation
}
criterion_main!(benches);
