use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sono_core::biosignal::synth::{add_noise, beats_with_variability, gaussian_train};
use sono_core::biosignal::{detect_r_peaks_with, EcgRecord};
use sono_core::exec::Execution;
use sono_core::registration::{kabsch_solve_batch, PointCorrespondences};
use sono_core::spatial::{RigidTransform, Rotation, Vec3};
use sono_core::stats::{wilcoxon_signed_rank_with, PairedSample};

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn wilcoxon_exact(c: &mut Criterion) {
    let d: Vec<f64> = (1..=20)
        .map(|i| {
            if i % 3 == 0 {
                -(i as f64)
            } else {
                i as f64 * 1.1
            }
        })
        .collect();
    let sample = PairedSample::from_differences(&d).unwrap();
    let mut g = c.benchmark_group("wilcoxon_exact_m20");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| wilcoxon_signed_rank_with(black_box(&sample), exec).unwrap())
        });
    }
    g.finish();
}

fn kabsch_batch(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch: Vec<PointCorrespondences> = (0..2000)
        .map(|_| {
            let axis = Vec3::new(rng.random(), rng.random(), 1.0)
                .try_normalize()
                .unwrap();
            let t = RigidTransform::new(
                Rotation::from_axis_angle(axis, rng.random_range(-3.0..3.0)).unwrap(),
                Vec3::X,
            );
            let v: Vec<Vec3> = (0..8)
                .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
                .collect();
            let r = v.iter().map(|p| t.transform_point(*p)).collect();
            PointCorrespondences::new(v, r).unwrap()
        })
        .collect();
    let mut g = c.benchmark_group("kabsch_batch_2000");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| kabsch_solve_batch(exec, black_box(&batch)))
        });
    }
    g.finish();
}

fn r_peak_detection(c: &mut Criterion) {
    let fs = 500.0;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let beats = beats_with_variability(0.5, 299.0, 0.85, 0.05, &mut rng);
    let ecg = EcgRecord::new(
        fs,
        add_noise(&gaussian_train(fs, 300.0, &beats), 20.0, 3),
        0.0,
    )
    .unwrap();
    let mut g = c.benchmark_group("r_peaks_5min_500hz");
    g.sample_size(20);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| detect_r_peaks_with(black_box(&ecg), exec))
        });
    }
    g.finish();
}

criterion_group!(benches, wilcoxon_exact, kabsch_batch, r_peak_detection);
criterion_main!(benches);
