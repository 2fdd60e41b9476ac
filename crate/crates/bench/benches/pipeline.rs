use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use hte_core::clustering::kmeans;
use hte_core::cvae::{epoch_noise, JointInputs, JointModel, TrainConfig};
use hte_core::estimate::{fit_outcome, fit_propensity, tau_dr, EstimatorConfig};
use hte_core::graph::{build_graph, gat_forward, gat_grad, GatLayer};
use hte_core::pipeline::{run_pipeline, PipelineConfig};
use hte_core::simgen::{gen_dataset, SimConfig};
use hte_core::{Dataset, RngState};
use ndarray::Array2;

fn dataset(n: usize) -> Dataset {
    gen_dataset(&SimConfig {
        n,
        contamination_ratio: 0.2,
        seed: 1,
        ..SimConfig::default()
    })
    .unwrap()
}

fn graph_layer(c: &mut Criterion) {
    let ds = dataset(100);
    let g = build_graph(ds.x(), 0.3, 10).unwrap();
    let layer = GatLayer::init(g.feature_dim(), 8, &RngState::new(2));
    let upstream = Array2::from_elem((g.p(), 8), 0.1);
    c.bench_function("build_graph p=100", |b| {
        b.iter(|| build_graph(black_box(ds.x()), 0.3, 10).unwrap())
    });
    c.bench_function("gat_forward p=100", |b| {
        b.iter(|| gat_forward(black_box(&g), &layer).unwrap())
    });
    c.bench_function("gat_grad p=100", |b| {
        b.iter(|| gat_grad(black_box(&g), &layer, &upstream).unwrap())
    });
}

fn training_epoch(c: &mut Criterion) {
    let ds = dataset(100);
    let g = build_graph(ds.x(), 0.3, 10).unwrap();
    let cfg = TrainConfig::default();
    let model = JointModel::init(g.feature_dim(), &cfg, &RngState::new(3));
    let eps = epoch_noise(&RngState::new(4), 0, ds.n(), cfg.latent_dim);
    let inputs = JointInputs {
        graph: &g,
        x: ds.x(),
        t: ds.d(),
    };
    c.bench_function("loss_and_grad n=100 p=100", |b| {
        b.iter(|| model.loss_and_grad(black_box(inputs), &eps, 1.0).unwrap())
    });
}

fn clustering(c: &mut Criterion) {
    let mut r = RngState::new(5).rng();
    let codes = Array2::from_shape_fn((500, 2), |_| rand::Rng::random_range(&mut r, -3.0..3.0));
    c.bench_function("kmeans n=500 k=4", |b| {
        b.iter_batched(
            || RngState::new(6),
            |rng| kmeans(black_box(&codes), 4, &rng).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn estimation(c: &mut Criterion) {
    let ds = dataset(200);
    let features = ds.x().slice(ndarray::s![.., ..5]).to_owned();
    let cfg = EstimatorConfig::default();
    let pm = fit_propensity(&features, ds.d(), cfg.trim).unwrap();
    let om = fit_outcome(&features, ds.y(), ds.d(), cfg.ridge_lambda, cfg.huber_c).unwrap();
    let idx: Vec<usize> = (0..ds.n()).collect();
    c.bench_function("fit nuisance models n=200", |b| {
        b.iter(|| {
            fit_propensity(black_box(&features), ds.d(), cfg.trim).unwrap();
            fit_outcome(&features, ds.y(), ds.d(), cfg.ridge_lambda, cfg.huber_c).unwrap()
        })
    });
    c.bench_function("tau_dr n=200 bootstrap=500", |b| {
        b.iter(|| {
            tau_dr(
                black_box(&features),
                ds.y(),
                ds.d(),
                &pm,
                &om,
                &idx,
                4,
                500,
                &RngState::new(7),
            )
            .unwrap()
        })
    });
}

fn full_pipeline(c: &mut Criterion) {
    let ds = dataset(100);
    let cfg = PipelineConfig::default();
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    group.bench_function("run_pipeline n=100 p=100", |b| {
        b.iter(|| run_pipeline(black_box(&ds), &cfg, &RngState::new(8)).unwrap())
    });
    group.finish();
}

criterion_group!(
    benches,
    graph_layer,
    training_epoch,
    clustering,
    estimation,
    full_pipeline
);
criterion_main!(benches);
