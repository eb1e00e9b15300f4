// SPDX-License-Identifier: Apache-2.0

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lidar_cls::classifier::Model;
use lidar_cls::pipeline::{process_scan, propose, ScanSettings};
use lidar_cls::range_image::ProjectionConfig;
use lidar_cls::synth::random_street_scene;
use lidar_cls::Execution;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn bench_scan(c: &mut Criterion) {
    let model = Model::init_random(0);
    let settings = ScanSettings::default();
    let s = random_street_scene(7, 16).render("bench", &ProjectionConfig::default());

    let mut group = c.benchmark_group("propose");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| propose(&s.scan, Some(&s.labels), &settings, exec).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("process_scan");
    group.sample_size(20);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| process_scan(&s.scan, Some(&s.labels), &settings, &model, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_scan);
criterion_main!(benches);
