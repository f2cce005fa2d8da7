use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use uc2i::backbone::{forward, init_embeddings, NoiseSpec};
use uc2i::eval::{evaluate, Phase};
use uc2i::intents::{kmeans, solve_assignment};
use uc2i::{DatasetSplit, NormalizedAdjacency};
use uc2i_bench::{random_dataset, random_matrix};

// roughly ML-100K after filtering
const USERS: usize = 950;
const ITEMS: usize = 1150;
const DEGREE: usize = 85;

fn spmm(c: &mut Criterion) {
    let adj = NormalizedAdjacency::build(&random_dataset(USERS, ITEMS, DEGREE, 1)).unwrap();
    let mut group = c.benchmark_group("spmm");
    for dim in [32, 64] {
        let x = random_matrix(USERS + ITEMS, dim, 2);
        group.bench_with_input(BenchmarkId::from_parameter(dim), &x, |b, x| {
            b.iter(|| adj.multiply(black_box(x.view())).unwrap())
        });
    }
    group.finish();
}

fn propagation(c: &mut Criterion) {
    let adj = NormalizedAdjacency::build(&random_dataset(USERS, ITEMS, DEGREE, 1)).unwrap();
    let emb = init_embeddings(USERS, ITEMS, 64, 3).unwrap();
    let noise = NoiseSpec { rate: 0.1, seed: 4 };
    c.bench_function("forward/3 layers/noisy", |b| {
        b.iter(|| forward(black_box(&emb), &adj, 3, Some(noise)).unwrap())
    });
    c.bench_function("forward/3 layers/clean", |b| {
        b.iter(|| forward(black_box(&emb), &adj, 3, None).unwrap())
    });
}

fn hungarian(c: &mut Criterion) {
    let mut group = c.benchmark_group("hungarian");
    for n in [32, 128, 512] {
        let s = random_matrix(n, n, n as u64);
        group.bench_with_input(BenchmarkId::from_parameter(n), &s, |b, s| {
            b.iter(|| solve_assignment(black_box(s.view())).unwrap())
        });
    }
    group.finish();
}

fn clustering(c: &mut Criterion) {
    let x = random_matrix(USERS, 64, 5);
    let mut group = c.benchmark_group("kmeans/20 iters");
    group.sample_size(10);
    for k in [32, 256] {
        group.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, &k| {
            b.iter(|| kmeans(black_box(x.view()), k, 20, 6).unwrap())
        });
    }
    group.finish();
}

fn ranking(c: &mut Criterion) {
    let data = random_dataset(USERS, ITEMS, DEGREE, 1);
    let split = uc2i::dataset::split_dataset(&data, Default::default(), 7).unwrap();
    let adj = NormalizedAdjacency::build(&split.train).unwrap();
    let trace = forward(
        &init_embeddings(USERS, ITEMS, 64, 8).unwrap(),
        &adj,
        3,
        None,
    )
    .unwrap();
    let split: &DatasetSplit = &split;
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(20);
    group.bench_function("full ranking", |b| {
        b.iter(|| evaluate(black_box(&trace), split, Phase::Test, &[10, 20, 50]).unwrap())
    });
    group.finish();
}

criterion_group!(benches, spmm, propagation, hungarian, clustering, ranking);
criterion_main!(benches);
