//! Numerical check that clustering both sides of a joint distribution cannot raise
//! mutual information: `MI(K;L) ≤ MI(U;I)` whenever
//! `p(k,l) = Σ_{u,i} p(k|u) p(l|i) p(u,i)`.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Allowed excess of `MI(K;L)` over `MI(U;I)`, absorbing rounding.
pub const SLACK_TOLERANCE: f64 = 1e-9;

/// Exact mutual information in nats; zero entries contribute nothing.
pub fn exact_mutual_information(joint: &Array2<f64>) -> f64 {
    let row = joint.sum_axis(Axis(1));
    let col = joint.sum_axis(Axis(0));
    joint
        .indexed_iter()
        .filter(|(_, &p)| p > 0.0)
        .map(|((a, b), &p)| p * (p / (row[a] * col[b])).ln())
        .sum()
}

/// `p(k,l) = P_Kᵀ P_UI P_L`, with `P_K[u][k] = p(k|u)` and `P_L[i][l] = p(l|i)`.
pub fn cluster_joint(
    joint: &Array2<f64>,
    user_cond: &Array2<f64>,
    item_cond: &Array2<f64>,
) -> Array2<f64> {
    user_cond.t().dot(&joint.dot(item_cond))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Counterexample {
    pub trial: usize,
    pub joint: Vec<Vec<f64>>,
    pub user_cond: Vec<Vec<f64>>,
    pub item_cond: Vec<Vec<f64>>,
    pub mi_ui: f64,
    pub mi_kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoremReport {
    pub trials: usize,
    /// `min over trials of MI(U;I) - MI(K;L)`.
    pub min_slack: f64,
    pub max_slack: f64,
    /// Slack of the lossless case where every user and item is its own cluster.
    pub identity_slack: f64,
    pub violations: Vec<Counterexample>,
}

impl TheoremReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty() && self.identity_slack.abs() <= SLACK_TOLERANCE
    }
}

fn to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Nonnegative matrix with rows summing to one. Mixes dense rows, sparse rows and
/// one-hot rows so that boundary cases show up often.
fn random_conditional(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows, cols));
    for mut row in m.rows_mut() {
        match rng.random_range(0..4) {
            0 => row[rng.random_range(0..cols)] = 1.0,
            1 => row.fill(1.0),
            2 => row.mapv_inplace(|_| {
                if rng.random_bool(0.5) {
                    rng.random::<f64>()
                } else {
                    0.0
                }
            }),
            _ => row.mapv_inplace(|_| -(1.0 - rng.random::<f64>()).ln()),
        }
        if row.sum() == 0.0 {
            row[rng.random_range(0..cols)] = 1.0;
        }
        let s = row.sum();
        row /= s;
    }
    m
}

fn random_joint(rng: &mut ChaCha8Rng, users: usize, items: usize) -> Array2<f64> {
    let density = rng.random_range(0.2..=1.0);
    let mut m = Array2::from_shape_fn((users, items), |_| {
        if rng.random_bool(density) {
            -(1.0 - rng.random::<f64>()).ln()
        } else {
            0.0
        }
    });
    if m.sum() == 0.0 {
        m[[rng.random_range(0..users), rng.random_range(0..items)]] = 1.0;
    }
    let s = m.sum();
    m / s
}

/// `MI(U;I) - MI(K;L)` with identity conditionals on a random joint.
pub fn identity_slack(users: usize, items: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let joint = random_joint(&mut rng, users, items);
    let kl = cluster_joint(&joint, &Array2::eye(users), &Array2::eye(items));
    exact_mutual_information(&joint) - exact_mutual_information(&kl)
}

/// Runs `trials` random instances with `2..=max` users, items and clusters per side.
pub fn verify_theorem(
    trials: usize,
    max_users: usize,
    max_items: usize,
    max_clusters: usize,
    seed: u64,
) -> Result<TheoremReport> {
    if max_users < 2 || max_items < 2 || max_clusters < 2 {
        return Err(Error::Config(
            "theorem check needs at least 2 users, items and clusters".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_slack = f64::INFINITY;
    let mut max_slack = f64::NEG_INFINITY;
    let mut violations = Vec::new();
    for trial in 0..trials {
        let nu = rng.random_range(2..=max_users);
        let ni = rng.random_range(2..=max_items);
        let ck = rng.random_range(2..=max_clusters);
        let cl = rng.random_range(2..=max_clusters);
        let joint = random_joint(&mut rng, nu, ni);
        let pk = random_conditional(&mut rng, nu, ck);
        let pl = random_conditional(&mut rng, ni, cl);
        let mi_ui = exact_mutual_information(&joint);
        let mi_kl = exact_mutual_information(&cluster_joint(&joint, &pk, &pl));
        let slack = mi_ui - mi_kl;
        min_slack = min_slack.min(slack);
        max_slack = max_slack.max(slack);
        if slack < -SLACK_TOLERANCE || !slack.is_finite() {
            violations.push(Counterexample {
                trial,
                joint: to_rows(&joint),
                user_cond: to_rows(&pk),
                item_cond: to_rows(&pl),
                mi_ui,
                mi_kl,
            });
        }
    }
    let identity = identity_slack(max_users, max_items, seed ^ 0x9e37_79b9_7f4a_7c15);
    Ok(TheoremReport {
        trials,
        min_slack,
        max_slack,
        identity_slack: identity,
        violations,
    })
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    #[test]
    fn uniform_conditionals_give_zero_cluster_mi() {
        let joint = array![[0.4, 0.1], [0.0, 0.5]];
        let uniform = Array2::from_elem((2, 3), 1.0 / 3.0);
        let kl = cluster_joint(&joint, &uniform, &uniform);
        assert!(exact_mutual_information(&kl).abs() < 1e-15);
        assert!(exact_mutual_information(&joint) > 0.0);
    }

    #[test]
    fn identity_conditionals_are_lossless() {
        for seed in 0..20 {
            assert!(identity_slack(5, 7, seed).abs() <= 1e-12);
        }
    }

    #[test]
    fn small_campaign_has_no_violation() {
        let report = verify_theorem(500, 6, 6, 4, 3).unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.min_slack >= -SLACK_TOLERANCE);
    }

    #[test]
    fn conditionals_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let m = random_conditional(&mut rng, 4, 3);
            for row in m.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12 && row.iter().all(|&v| v >= 0.0));
            }
        }
    }
}
