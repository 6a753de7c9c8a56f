use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use otk_nas::fixtures::{golden_x, golden_z};
use otk_nas::pool::random_architecture;
use otk_nas::select::sample_kdpp;
use otk_nas::tw::kernel_matrix;
use otk_nas::{ArchMetric, Architecture, GpModel, KernelParams, SpaceSpec, TaxonomySpec, Vocabulary};

fn archs(n: usize, seed: u64) -> Vec<Architecture> {
    let space = SpaceSpec::new(Vocabulary::new(["cv1", "cv3", "mp3"]), 2, 7, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_architecture(&space, &mut rng)).collect()
}

fn bench_distance(c: &mut Criterion) {
    let (x, z) = (golden_x(), golden_z());
    for n in [1, 2] {
        c.bench_function(&format!("tw_components_{n}gram_cold"), |b| {
            b.iter_batched(
                || ArchMetric::new(TaxonomySpec::default_nb(), n).unwrap(),
                |m| m.components(&x, &z).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
}

fn bench_kernel_matrix(c: &mut Criterion) {
    let xs = archs(100, 1);
    let p = KernelParams::default();
    c.bench_function("kernel_matrix_100_cold", |b| {
        b.iter_batched(
            || ArchMetric::new(TaxonomySpec::default_nb(), 2).unwrap(),
            |m| kernel_matrix(&m, &xs, &p).unwrap(),
            BatchSize::SmallInput,
        )
    });
    let warm = ArchMetric::new(TaxonomySpec::default_nb(), 2).unwrap();
    kernel_matrix(&warm, &xs, &p).unwrap();
    c.bench_function("kernel_matrix_100_cached", |b| b.iter(|| kernel_matrix(&warm, &xs, &p).unwrap()));
}

fn bench_kdpp(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = DMatrix::from_fn(100, 100, |_, _| rng.random_range(-1.0..1.0));
    let k = &a * a.transpose();
    c.bench_function("kdpp_n100_b5", |b| b.iter(|| sample_kdpp(&k, 5, &mut rng).unwrap()));
}

fn bench_gp_fit(c: &mut Criterion) {
    let metric = Arc::new(ArchMetric::new(TaxonomySpec::default_nb(), 2).unwrap());
    let xs = archs(100, 3);
    let ys: Vec<f64> = (0..xs.len()).map(|i| (i as f64 * 0.37).sin()).collect();
    let p = KernelParams::new(1.0, 2.0, 2.0, 1e-2);
    GpModel::fit(metric.clone(), &xs, &ys, p).unwrap();
    c.bench_function("gp_fit_100", |b| b.iter(|| GpModel::fit(metric.clone(), &xs, &ys, p).unwrap()));
    let model = GpModel::fit(metric.clone(), &xs, &ys, p).unwrap();
    c.bench_function("gp_lml_gradient_100", |b| b.iter(|| model.lml_gradient()));
}

criterion_group!(benches, bench_distance, bench_kernel_matrix, bench_kdpp, bench_gp_fit);
criterion_main!(benches);
