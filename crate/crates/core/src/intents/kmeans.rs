use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backbone::dot;
use crate::error::{Error, Result};

/// Hard k-means result.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    pub centroids: Array2<f64>,
    pub labels: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each assignment step, non-increasing.
    pub history: Vec<f64>,
}

impl Centroids {
    pub fn len(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.nrows() == 0
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by Lloyd iterations until the labels stop changing or
/// `iters` assignment steps have run. Empty clusters take the point farthest from its
/// own centroid.
pub fn kmeans(x: ArrayView2<'_, f64>, k: usize, iters: usize, seed: u64) -> Result<Centroids> {
    let (m, d) = x.dim();
    if k == 0 || m < k {
        return Err(Error::Config(format!(
            "cannot form {k} clusters from {m} points"
        )));
    }
    let x = x.as_standard_layout();
    let data = x.as_slice().expect("standard layout");
    let point = |p: usize| &data[p * d..(p + 1) * d];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Array2::<f64>::zeros((k, d));
    {
        let mut chosen = Vec::with_capacity(k);
        chosen.push(rng.random_range(0..m));
        let mut closest: Vec<f64> = (0..m)
            .map(|p| sq_dist(point(p), point(chosen[0])))
            .collect();
        while chosen.len() < k {
            let total: f64 = closest.iter().sum();
            let next = if total > 0.0 {
                let mut target = rng.random::<f64>() * total;
                let mut pick = m - 1;
                for (p, &w) in closest.iter().enumerate() {
                    if w > 0.0 && target < w {
                        pick = p;
                        break;
                    }
                    target -= w;
                }
                // rounding can walk off the end onto an already-chosen point
                if closest[pick] == 0.0 {
                    pick = closest.iter().rposition(|&w| w > 0.0).expect("total > 0");
                }
                pick
            } else {
                rng.random_range(0..m)
            };
            chosen.push(next);
            for (p, c) in closest.iter_mut().enumerate() {
                *c = c.min(sq_dist(point(p), point(next)));
            }
        }
        for (c, &p) in chosen.iter().enumerate() {
            centroids
                .row_mut(c)
                .iter_mut()
                .zip(point(p))
                .for_each(|(o, &v)| *o = v);
        }
    }

    let mut labels = vec![usize::MAX; m];
    let mut dists = vec![0.0; m];
    let mut history = Vec::new();
    for _ in 0..iters.max(1) {
        let cent = centroids.as_slice().expect("standard layout");
        let assigned: Vec<(usize, f64)> = (0..m)
            .into_par_iter()
            .map(|p| {
                let mut best = (0, f64::INFINITY);
                for c in 0..k {
                    let dist = sq_dist(point(p), &cent[c * d..(c + 1) * d]);
                    if dist < best.1 {
                        best = (c, dist);
                    }
                }
                best
            })
            .collect();
        let changed = assigned.iter().zip(&labels).any(|(a, &l)| a.0 != l);
        for (p, (c, dist)) in assigned.into_iter().enumerate() {
            labels[p] = c;
            dists[p] = dist;
        }
        history.push(dists.iter().sum());
        if !changed {
            break;
        }
        update_centroids(data, d, &mut labels, &mut dists, &mut centroids);
    }

    let cent = centroids.as_slice().expect("standard layout");
    let inertia = (0..m)
        .map(|p| sq_dist(point(p), &cent[labels[p] * d..(labels[p] + 1) * d]))
        .sum();
    Ok(Centroids {
        centroids,
        labels,
        inertia,
        history,
    })
}

/// Sets each centroid to the mean of its members, reseeding empty clusters.
fn update_centroids(
    data: &[f64],
    d: usize,
    labels: &mut [usize],
    dists: &mut [f64],
    centroids: &mut Array2<f64>,
) {
    let k = centroids.nrows();
    let m = labels.len();
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        // farthest point from its own centroid among clusters that can spare one
        let donor = (0..m)
            .filter(|&p| counts[labels[p]] > 1)
            .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
            .expect("m >= k guarantees a cluster with two members");
        counts[labels[donor]] -= 1;
        labels[donor] = c;
        counts[c] = 1;
        dists[donor] = 0.0;
    }

    centroids.fill(0.0);
    let cent = centroids.as_slice_mut().expect("standard layout");
    for (p, &l) in labels.iter().enumerate() {
        for (o, v) in cent[l * d..(l + 1) * d]
            .iter_mut()
            .zip(&data[p * d..(p + 1) * d])
        {
            *o += v;
        }
    }
    for (c, &count) in counts.iter().enumerate() {
        let inv = 1.0 / count as f64;
        cent[c * d..(c + 1) * d].iter_mut().for_each(|v| *v *= inv);
    }
}

/// Cosine similarity, zero when either side has zero norm.
pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}
