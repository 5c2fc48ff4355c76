use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use mx_bench::mx_pair;
use mx_core::minifloat::FloatSpec;
use mx_core::mx::{mx_dot_with, AccumulatorKind};

fn dot(c: &mut Criterion) {
    let n = 4096;
    let mut g = c.benchmark_group("mx_dot");
    g.throughput(Throughput::Elements(n as u64));
    for spec in [FloatSpec::E4M3, FloatSpec::E5M2, FloatSpec::E3M4] {
        let (a, b) = mx_pair(spec, 32, n, 7);
        let cases = [
            ("wide-lut", AccumulatorKind::WideFloat, true),
            ("wide", AccumulatorKind::WideFloat, false),
            ("exact", AccumulatorKind::Exact, false),
            ("narrow", AccumulatorKind::NarrowSameFormat, false),
        ];
        for (name, acc, lut) in cases {
            if mx_dot_with(&a, &b, acc, lut).is_err() {
                continue;
            }
            g.bench_with_input(BenchmarkId::new(name, spec.id()), &(&a, &b), |bench, (a, b)| {
                bench.iter(|| mx_dot_with(black_box(a), black_box(b), acc, lut).unwrap())
            });
        }
    }
    g.finish();
}

criterion_group!(benches, dot);
criterion_main!(benches);
