// SPDX-License-Identifier: Apache-2.0

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use lidar_cls::classifier::{forward, Model};
use lidar_cls::synth::random_batch;
use lidar_cls::Execution;

fn bench_forward(c: &mut Criterion) {
    let model = Model::init_random(0);
    let mut group = c.benchmark_group("forward");
    for n in [1usize, 16, 100] {
        let batch = random_batch(n, 4, 32, 1);
        group.throughput(Throughput::Elements(n as u64));
        for (name, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
            group.bench_with_input(BenchmarkId::new(name, n), &batch, |b, batch| {
                b.iter(|| forward(&model, batch, exec).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, bench_forward);
criterion_main!(benches);
