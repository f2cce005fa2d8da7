//! User-item co-cluster distribution and its mutual information.
//!
//! Soft memberships are clamped cosines `p(k|u) = max(0, ⟨û, ĉ_k⟩)`, pair weights are
//! `w(u,i) = max(0, ⟨û, î⟩)` over observed pairs, and the joint is
//! `J[k][l] = Σ_(u,i) p(k|u) p(l|i) w(u,i)` normalized to sum to one.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};

use crate::backbone::{dot, EmbeddingTable};
use crate::error::{Error, Result};

use super::GradBuffer;

/// Joint entries below this are treated as exact zeros.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct CoClusterDistribution {
    pub joint: Array2<f64>,
    pub user_marginal: Array1<f64>,
    pub item_marginal: Array1<f64>,
    /// Unnormalized mass `Σ J`.
    pub mass: f64,
    /// Set when every pair contributed zero mass; the joint is then uniform.
    pub degenerate: bool,
    /// Users that appear in the pairs (side-local indices), ascending.
    pub users: Vec<usize>,
    /// Items that appear in the pairs (side-local indices), ascending.
    pub items: Vec<usize>,
    /// Clamped memberships, one row per entry of `users` / `items`.
    pub user_membership: Array2<f64>,
    pub item_membership: Array2<f64>,
    /// `(user slot, item slot, weight)` for each distinct pair.
    pub pairs: Vec<(usize, usize, f64)>,
    // cached for the backward pass
    user_hat: Array2<f64>,
    user_norm: Vec<f64>,
    item_hat: Array2<f64>,
    item_norm: Vec<f64>,
    user_centroid_hat: Array2<f64>,
    item_centroid_hat: Array2<f64>,
    num_users: usize,
}

fn unit_rows(m: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut hat = m.clone();
    let mut norms = Vec::with_capacity(m.nrows());
    for mut row in hat.axis_iter_mut(Axis(0)) {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
        norms.push(n);
    }
    (hat, norms)
}

fn gather(base: &EmbeddingTable, offset: usize, idx: &[usize]) -> Array2<f64> {
    let d = base.dim();
    let mut out = Array2::zeros((idx.len(), d));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r)
            .iter_mut()
            .zip(base.row(offset + i))
            .for_each(|(o, &v)| *o = v);
    }
    out
}

/// Builds the co-cluster joint from the given observed pairs.
pub fn cocluster_distribution(
    base: &EmbeddingTable,
    user_centroids: &Array2<f64>,
    item_centroids: &Array2<f64>,
    positive_pairs: &[(usize, usize)],
) -> Result<CoClusterDistribution> {
    let (nu, ni, d) = (base.num_users(), base.num_items(), base.dim());
    if user_centroids.ncols() != d || item_centroids.ncols() != d {
        return Err(Error::Shape(
            "centroid dimension differs from embedding dimension".into(),
        ));
    }
    let mut user_slot = BTreeMap::new();
    let mut item_slot = BTreeMap::new();
    for &(u, i) in positive_pairs {
        if u >= nu {
            return Err(Error::Bounds {
                index: u,
                limit: nu,
            });
        }
        if i >= ni {
            return Err(Error::Bounds {
                index: i,
                limit: ni,
            });
        }
        user_slot.insert(u, 0usize);
        item_slot.insert(i, 0usize);
    }
    let users: Vec<usize> = user_slot.keys().copied().collect();
    let items: Vec<usize> = item_slot.keys().copied().collect();
    for (s, v) in user_slot.values_mut().enumerate() {
        *v = s;
    }
    for (s, v) in item_slot.values_mut().enumerate() {
        *v = s;
    }

    let (user_hat, user_norm) = unit_rows(&gather(base, 0, &users));
    let (item_hat, item_norm) = unit_rows(&gather(base, nu, &items));
    let (user_centroid_hat, _) = unit_rows(user_centroids);
    let (item_centroid_hat, _) = unit_rows(item_centroids);

    let user_membership = user_hat.dot(&user_centroid_hat.t()).mapv(|v| v.max(0.0));
    let item_membership = item_hat.dot(&item_centroid_hat.t()).mapv(|v| v.max(0.0));

    let mut seen = std::collections::BTreeSet::new();
    let mut pairs = Vec::new();
    for &(u, i) in positive_pairs {
        if seen.insert((u, i)) {
            let (us, is) = (user_slot[&u], item_slot[&i]);
            let w = dot(
                user_hat.row(us).as_slice().expect("standard layout"),
                item_hat.row(is).as_slice().expect("standard layout"),
            )
            .max(0.0);
            pairs.push((us, is, w));
        }
    }

    // J = Aᵀ (W B), where W is the sparse users x items pair-weight matrix
    let mut weighted_items = Array2::zeros((users.len(), item_membership.ncols()));
    for &(us, is, w) in &pairs {
        if w > 0.0 {
            weighted_items
                .row_mut(us)
                .scaled_add(w, &item_membership.row(is));
        }
    }
    let unnormalized = user_membership.t().dot(&weighted_items);
    let mass = unnormalized.sum();
    let (ck, cl) = unnormalized.dim();
    let (joint, degenerate) = if mass > 0.0 && mass.is_finite() {
        (unnormalized / mass, false)
    } else {
        log::warn!("co-cluster joint has no mass; falling back to the uniform joint");
        (Array2::from_elem((ck, cl), 1.0 / (ck * cl) as f64), true)
    };
    let user_marginal = joint.sum_axis(Axis(1));
    let item_marginal = joint.sum_axis(Axis(0));

    Ok(CoClusterDistribution {
        joint,
        user_marginal,
        item_marginal,
        mass,
        degenerate,
        users,
        items,
        user_membership,
        item_membership,
        pairs,
        user_hat,
        user_norm,
        item_hat,
        item_norm,
        user_centroid_hat,
        item_centroid_hat,
        num_users: nu,
    })
}

/// `MI = Σ p(k,l) ln(p(k,l) / (p(k) p(l)))` in nats, ignoring entries below
/// [`PROB_FLOOR`].
pub fn mutual_information(joint: &Array2<f64>) -> f64 {
    let pk = joint.sum_axis(Axis(1));
    let pl = joint.sum_axis(Axis(0));
    let mut mi = 0.0;
    for ((k, l), &p) in joint.indexed_iter() {
        if p >= PROB_FLOOR {
            mi += p * (p / (pk[k] * pl[l])).ln();
        }
    }
    mi
}

/// `∂MI/∂p(k,l)` treating every joint entry as a free variable.
fn mi_entry_gradient(joint: &Array2<f64>) -> Array2<f64> {
    let pk = joint.sum_axis(Axis(1));
    let pl = joint.sum_axis(Axis(0));
    // share of each marginal carried by entries above the floor
    let mut row_share = Array1::<f64>::zeros(pk.len());
    let mut col_share = Array1::<f64>::zeros(pl.len());
    for ((k, l), &p) in joint.indexed_iter() {
        if p >= PROB_FLOOR {
            row_share[k] += p / pk[k];
            col_share[l] += p / pl[l];
        }
    }
    Array2::from_shape_fn(joint.dim(), |(k, l)| {
        let p = joint[[k, l]];
        let own = if p >= PROB_FLOOR {
            (p / (pk[k] * pl[l])).ln() + 1.0
        } else {
            0.0
        };
        let rs = if pk[k] > 0.0 { row_share[k] } else { 0.0 };
        let cs = if pl[l] > 0.0 { col_share[l] } else { 0.0 };
        own - rs - cs
    })
}

/// `-MI(K;L)` and its gradient w.r.t. the base embeddings of the users and items in the
/// distribution. Centroids are treated as constants.
pub fn mi_loss(dist: &CoClusterDistribution, total_rows: usize) -> (f64, GradBuffer) {
    let d = dist.user_hat.ncols();
    let mut grads = GradBuffer::new(total_rows, d);
    if dist.degenerate {
        log::warn!("degenerate co-cluster distribution; MI loss is 0");
        return (0.0, grads);
    }
    let mi = mutual_information(&dist.joint);

    // chain through J -> p = J / ΣJ, then negate for the loss
    let g_p = mi_entry_gradient(&dist.joint);
    let mean = (&g_p * &dist.joint).sum();
    let g_j = g_p.mapv(|g| -(g - mean) / dist.mass);

    let a = &dist.user_membership;
    let b = &dist.item_membership;
    let mut weighted_items = Array2::zeros((a.nrows(), b.ncols()));
    for &(us, is, w) in &dist.pairs {
        if w > 0.0 {
            weighted_items.row_mut(us).scaled_add(w, &b.row(is));
        }
    }
    // J = Aᵀ M  =>  dA = M Gᵀ, dM = A G
    let mut d_a = weighted_items.dot(&g_j.t());
    let d_m = a.dot(&g_j);

    let mut d_b = Array2::<f64>::zeros(b.dim());
    let mut d_user_hat = Array2::<f64>::zeros(dist.user_hat.dim());
    let mut d_item_hat = Array2::<f64>::zeros(dist.item_hat.dim());
    for &(us, is, w) in &dist.pairs {
        if w <= 0.0 {
            continue;
        }
        let dm = d_m.row(us);
        d_b.row_mut(is).scaled_add(w, &dm);
        let d_w = dm.dot(&b.row(is));
        d_user_hat
            .row_mut(us)
            .scaled_add(d_w, &dist.item_hat.row(is));
        d_item_hat
            .row_mut(is)
            .scaled_add(d_w, &dist.user_hat.row(us));
    }

    // clamp: gradient passes only where the cosine was positive
    d_a.zip_mut_with(a, |g, &v| {
        if v <= 0.0 {
            *g = 0.0
        }
    });
    let mut d_b = d_b;
    d_b.zip_mut_with(b, |g, &v| {
        if v <= 0.0 {
            *g = 0.0
        }
    });
    d_user_hat += &d_a.dot(&dist.user_centroid_hat);
    d_item_hat += &d_b.dot(&dist.item_centroid_hat);

    let mut scatter =
        |hat: &Array2<f64>, norms: &[f64], d_hat: &Array2<f64>, idx: &[usize], offset: usize| {
            for (s, &node) in idx.iter().enumerate() {
                let n = norms[s];
                if n == 0.0 {
                    continue;
                }
                let h = hat.row(s);
                let g = d_hat.row(s);
                let radial = g.dot(&h);
                let row = grads.row_mut(offset + node);
                for j in 0..d {
                    row[j] += (g[j] - radial * h[j]) / n;
                }
            }
        };
    scatter(&dist.user_hat, &dist.user_norm, &d_user_hat, &dist.users, 0);
    scatter(
        &dist.item_hat,
        &dist.item_norm,
        &d_item_hat,
        &dist.items,
        dist.num_users,
    );

    (-mi, grads)
}
