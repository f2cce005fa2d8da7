//! Direct-definition oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashSet;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uc2i::dataset::{split_dataset, SplitRatios};
use uc2i::{DatasetSplit, InteractionDataset};

/// Unmasked items sorted by descending score, lower index first on ties, via a full sort.
pub fn ranking_oracle(scores: &[f64], masked: &[bool]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| !masked[i]).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx
}

pub fn recall_oracle(ranking: &[usize], relevant: &[usize], n: usize) -> f64 {
    let top: HashSet<usize> = ranking.iter().take(n).copied().collect();
    let rel: HashSet<usize> = relevant.iter().copied().collect();
    top.intersection(&rel).count() as f64 / rel.len() as f64
}

pub fn ndcg_oracle(ranking: &[usize], relevant: &[usize], n: usize) -> f64 {
    let mut dcg = 0.0;
    for (pos, item) in ranking.iter().take(n).enumerate() {
        if relevant.contains(item) {
            dcg += 1.0 / (pos as f64 + 2.0).log2();
        }
    }
    let mut idcg = 0.0;
    for r in 1..=n.min(relevant.len()) {
        idcg += 1.0 / (r as f64 + 1.0).log2();
    }
    dcg / idcg
}

/// A random ranking over up to 60 items and a non-empty relevant set drawn from it.
pub fn random_ranking_instance(rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>, usize) {
    let items = rng.random_range(1..=60);
    let mut ranking: Vec<usize> = (0..items).collect();
    for i in (1..items).rev() {
        ranking.swap(i, rng.random_range(0..=i));
    }
    let mut relevant: Vec<usize> = (0..items).filter(|_| rng.random_bool(0.2)).collect();
    if relevant.is_empty() {
        relevant.push(rng.random_range(0..items));
    }
    let n = rng.random_range(1..=items + 5);
    (ranking, relevant, n)
}

/// Random interactions with a guaranteed minimum per-user degree, split 8:1:1.
pub fn synthetic_split(users: usize, items: usize, per_user: usize, seed: u64) -> DatasetSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for u in 0..users {
        // a shared taste band makes the data learnable
        let centre = (u * items / users + rng.random_range(0..3)) % items;
        for k in 0..per_user {
            let spread = if rng.random_bool(0.8) { 6 } else { items };
            edges.push((u, (centre + k * 2 + rng.random_range(0..spread)) % items));
        }
    }
    let data = InteractionDataset::from_edges(users, items, edges).unwrap();
    split_dataset(&data, SplitRatios::default(), seed).unwrap()
}

/// `data/ml-100k/u.data` at the workspace root, if present.
pub fn ml100k_path() -> Option<PathBuf> {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/ml-100k/u.data");
    p.exists().then_some(p)
}
