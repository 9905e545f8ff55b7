use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use nalgebra::DMatrix;
use twinshield::causal::bca_bootstrap;
use twinshield::forest::fit_forest;
use twinshield::impute::{impute_pmm, PmmSettings};
use twinshield::infer::{ols_cr2, qreg_fit, DesignMatrix, DfRule};
use twinshield::simdgp::generate;
use twinshield::synth::{fit_diffusion, sample_twins};
use twinshield::{DgpConfig, DiffusionConfig, ForestConfig};

fn fixture(n: usize) -> (DMatrix<f64>, Vec<f64>, Vec<usize>) {
    let x = DMatrix::from_fn(n, 4, |i, j| {
        if j == 0 {
            1.0
        } else {
            ((i * (j + 3) * 7919) % 1000) as f64 / 100.0
        }
    });
    let y = (0..n)
        .map(|i| 2.0 + x[(i, 1)] - 0.5 * x[(i, 2)] + ((i * 104729) % 997) as f64 / 100.0)
        .collect();
    let clusters = (0..n).map(|i| i % 14).collect();
    (x, y, clusters)
}

fn inference(c: &mut Criterion) {
    let (x, y, clusters) = fixture(2000);
    let names = vec!["(Intercept)".into(), "a".into(), "b".into(), "c".into()];
    let design = DesignMatrix::from_parts(names, x.clone(), &clusters).unwrap();
    c.bench_function("ols_cr2 n=2000 k=4 G=14", |b| {
        b.iter(|| ols_cr2(black_box(&design), black_box(&y), DfRule::Satterthwaite).unwrap())
    });
    c.bench_function("qreg_fit n=2000 k=4 tau=0.9", |b| {
        b.iter(|| qreg_fit(black_box(&x), black_box(&y), 0.9).unwrap())
    });
    c.bench_function("bca_bootstrap n=2000 B=1000", |b| {
        b.iter(|| bca_bootstrap(black_box(&y), 1000, 0.05, 7).unwrap())
    });
}

fn learners(c: &mut Criterion) {
    let sim = generate(&DgpConfig {
        n: 1000,
        ..DgpConfig::default()
    })
    .unwrap();
    let t = &sim.table;
    let cols: Vec<Vec<f64>> = ["age", "distress", "wealth", "adl"]
        .iter()
        .map(|n| t.column_by_name(n).unwrap().to_vec())
        .collect();
    let y = t.column_by_name("oop").unwrap().to_vec();
    let cfg = ForestConfig {
        n_trees: 50,
        ..ForestConfig::default()
    };
    c.bench_function("fit_forest n=1000 trees=50", |b| {
        b.iter(|| fit_forest(black_box(&cols), black_box(&y), &cfg).unwrap())
    });

    let gappy = generate(&DgpConfig {
        n: 1000,
        missing_rate: 0.1,
        ..DgpConfig::default()
    })
    .unwrap();
    let settings = PmmSettings {
        m: 2,
        iterations: 5,
        ..PmmSettings::default()
    };
    c.bench_function("impute_pmm n=1000 m=2", |b| {
        b.iter(|| impute_pmm(black_box(&gappy.table), &settings).unwrap())
    });
}

fn diffusion(c: &mut Criterion) {
    let sim = generate(&DgpConfig {
        n: 500,
        ..DgpConfig::default()
    })
    .unwrap();
    let cfg = DiffusionConfig {
        epochs: 5,
        ..DiffusionConfig::desk()
    };
    let mut g = c.benchmark_group("diffusion");
    g.sample_size(10);
    g.bench_function("fit n=500 epochs=5", |b| {
        b.iter(|| fit_diffusion(black_box(&sim.table), &cfg, 1).unwrap())
    });
    let model = fit_diffusion(&sim.table, &cfg, 1).unwrap();
    g.bench_function("sample 500 twins T=100", |b| {
        b.iter_batched(
            || 2u64,
            |seed| sample_twins(&model, 500, seed).unwrap(),
            BatchSize::SmallInput,
        )
    });
    g.finish();
}

criterion_group!(benches, inference, learners, diffusion);
criterion_main!(benches);
