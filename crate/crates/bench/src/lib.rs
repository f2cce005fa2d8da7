//! Synthetic fixtures for the benchmarks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uc2i::InteractionDataset;

/// Random bipartite interactions with `per_user` distinct items per user.
pub fn random_dataset(
    users: usize,
    items: usize,
    per_user: usize,
    seed: u64,
) -> InteractionDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_user = per_user.min(items);
    let mut edges = Vec::with_capacity(users * per_user);
    for u in 0..users {
        let start = rng.random_range(0..items);
        let stride = 1 + rng.random_range(0..3);
        let mut picked = std::collections::BTreeSet::new();
        let mut k = 0;
        while picked.len() < per_user {
            picked.insert((start + k * stride + rng.random_range(0..2)) % items);
            k += 1;
        }
        edges.extend(picked.into_iter().map(|i| (u, i)));
    }
    InteractionDataset::from_edges(users, items, edges).expect("fixture edges are in range")
}

/// `rows × cols` uniform values in [-1, 1).
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}
