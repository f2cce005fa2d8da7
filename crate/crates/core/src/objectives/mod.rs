//! Every training loss with its exact gradient with respect to the base embeddings.
//!
//! Losses that read propagated layers produce [`LayerGrads`](crate::backbone::LayerGrads) and reach the base table
//! through [`pullback`]; losses on the base table produce a [`GradBuffer`] directly.

mod bpr;
mod cocluster;
mod grad;
mod ins;
mod ucl;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backbone::{pullback, EmbeddingTable, ForwardTrace, Hyperparameters};
use crate::error::{Error, Result};
use crate::graph::NormalizedAdjacency;
use crate::intents::{Assignment, Centroids, TargetSet};

pub use self::bpr::{bpr_loss, bpr_loss_layers, sigmoid, softplus};
pub use self::cocluster::{
    cocluster_distribution, mi_loss, mutual_information, CoClusterDistribution, PROB_FLOOR,
};
pub use self::grad::GradBuffer;
pub use self::ins::{ins_loss, ins_loss_layers};
pub use self::ucl::ucl_loss;

/// Which half of the embedding table a side-local index refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    User,
    Item,
}

impl Side {
    pub fn len(self, num_users: usize, num_items: usize) -> usize {
        match self {
            Side::User => num_users,
            Side::Item => num_items,
        }
    }

    /// Row of side-local index 0 in the embedding table.
    pub fn offset(self, num_users: usize) -> usize {
        match self {
            Side::User => 0,
            Side::Item => num_users,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::User => "user",
            Side::Item => "item",
        })
    }
}

/// BPR triples `(u, i⁺, j⁻)` plus the distinct members they touch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    triples: Vec<(usize, usize, usize)>,
    users: Vec<usize>,
    items: Vec<usize>,
    pairs: Vec<(usize, usize)>,
}

impl Batch {
    pub fn new(triples: Vec<(usize, usize, usize)>) -> Self {
        let mut users = BTreeSet::new();
        let mut items = BTreeSet::new();
        let mut pairs = BTreeSet::new();
        for &(u, i, j) in &triples {
            users.insert(u);
            items.insert(i);
            items.insert(j);
            pairs.insert((u, i));
        }
        Self {
            triples,
            users: users.into_iter().collect(),
            items: items.into_iter().collect(),
            pairs: pairs.into_iter().collect(),
        }
    }

    pub fn triples(&self) -> &[(usize, usize, usize)] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Distinct users, ascending.
    pub fn users(&self) -> &[usize] {
        &self.users
    }

    /// Distinct positive and negative items, ascending.
    pub fn items(&self) -> &[usize] {
        &self.items
    }

    /// Distinct observed `(u, i⁺)` pairs, ascending.
    pub fn positive_pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Members of one side, ascending.
    pub fn members(&self, side: Side) -> &[usize] {
        match side {
            Side::User => &self.users,
            Side::Item => &self.items,
        }
    }

    /// Embedding-table rows touched by the batch.
    pub fn touched_rows(&self, num_users: usize) -> Vec<usize> {
        self.users
            .iter()
            .copied()
            .chain(self.items.iter().map(|&i| num_users + i))
            .collect()
    }
}

/// Value of every loss term, unweighted, plus the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub ucl_user: f64,
    pub ucl_item: f64,
    pub mi: f64,
    pub ins_user: f64,
    pub ins_item: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Field-wise `self += other * scale`.
    pub fn accumulate(&mut self, other: &LossBreakdown, scale: f64) {
        self.rec += scale * other.rec;
        self.ucl_user += scale * other.ucl_user;
        self.ucl_item += scale * other.ucl_item;
        self.mi += scale * other.mi;
        self.ins_user += scale * other.ins_user;
        self.ins_item += scale * other.ins_item;
        self.reg += scale * other.reg;
        self.total += scale * other.total;
    }

    pub fn is_finite(&self) -> bool {
        [
            self.rec,
            self.ucl_user,
            self.ucl_item,
            self.mi,
            self.ins_user,
            self.ins_item,
            self.reg,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Effective term weights for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub alpha: f64,
}

impl LossWeights {
    /// Weights from the hyperparameters; warm-up switches off the intent terms.
    pub fn new(hp: &Hyperparameters, warmup: bool) -> Self {
        Self {
            lambda1: if warmup { 0.0 } else { hp.lambda1 },
            lambda2: if warmup { 0.0 } else { hp.lambda2 },
            lambda3: hp.lambda3,
            alpha: hp.alpha,
        }
    }
}

/// Fills in `total` from the individual terms.
pub fn total_loss(parts: LossBreakdown, w: &LossWeights) -> LossBreakdown {
    let total = parts.rec
        + w.lambda1 * (parts.ucl_user + w.alpha * parts.ucl_item)
        + w.lambda2 * parts.mi
        + w.lambda3 * (parts.ins_user + w.alpha * parts.ins_item)
        + parts.reg;
    LossBreakdown { total, ..parts }
}

/// `λ_reg Σ ‖E_r‖²` over the given rows (duplicates count once) and its gradient.
pub fn reg_loss(
    base: &EmbeddingTable,
    rows: &[usize],
    lambda_reg: f64,
) -> Result<(f64, GradBuffer)> {
    let mut grads = GradBuffer::new(base.num_nodes(), base.dim());
    let mut loss = 0.0;
    for &r in rows {
        if r >= base.num_nodes() {
            return Err(Error::Bounds {
                index: r,
                limit: base.num_nodes(),
            });
        }
        if grads.contains(r) {
            continue;
        }
        let e = base.row(r);
        loss += e.iter().map(|v| v * v).sum::<f64>();
        grads.add_row(r, e, 2.0 * lambda_reg);
    }
    Ok((lambda_reg * loss, grads))
}

/// Clusters, targets and their matching for one side.
#[derive(Debug, Clone, Copy)]
pub struct SideIntents<'a> {
    pub clusters: &'a Centroids,
    pub targets: &'a TargetSet,
    pub assignment: &'a Assignment,
}

/// Intent state for both sides, refreshed once per epoch.
#[derive(Debug, Clone, Copy)]
pub struct IntentContext<'a> {
    pub user: SideIntents<'a>,
    pub item: SideIntents<'a>,
}

/// The complete objective on one batch: every term, the weighted total, and the
/// gradient of the total with respect to the base table.
///
/// `trace` must have been produced from `base`. Intent terms are skipped (reported as 0)
/// when their weight is zero or `intents` is `None`; instance terms when `λ3 = 0`.
pub fn joint_objective(
    base: &EmbeddingTable,
    adj: &NormalizedAdjacency,
    trace: &ForwardTrace,
    batch: &Batch,
    intents: Option<&IntentContext<'_>>,
    hp: &Hyperparameters,
    warmup: bool,
) -> Result<(LossBreakdown, GradBuffer)> {
    let w = LossWeights::new(hp, warmup);
    let mut parts = LossBreakdown::default();

    let (rec, mut layer_grads) = bpr_loss_layers(trace, batch)?;
    parts.rec = rec;
    if w.lambda3 > 0.0 {
        let (lu, gu) = ins_loss_layers(trace, batch.users(), hp.ins_layer, hp.tau, Side::User)?;
        let (li, gi) = ins_loss_layers(trace, batch.items(), hp.ins_layer, hp.tau, Side::Item)?;
        layer_grads.add_scaled(&gu, w.lambda3);
        layer_grads.add_scaled(&gi, w.lambda3 * w.alpha);
        parts.ins_user = lu;
        parts.ins_item = li;
    }
    let mut grads = pullback(adj, &layer_grads)?;

    if let Some(ctx) = intents {
        if w.lambda1 > 0.0 {
            for (side, si, scale) in [
                (Side::User, ctx.user, w.lambda1),
                (Side::Item, ctx.item, w.lambda1 * w.alpha),
            ] {
                let (l, g) = ucl_loss(
                    base,
                    batch.members(side),
                    &si.clusters.labels,
                    si.assignment,
                    si.targets,
                    hp.tau,
                    side,
                )?;
                grads.add_scaled(&g, scale);
                match side {
                    Side::User => parts.ucl_user = l,
                    Side::Item => parts.ucl_item = l,
                }
            }
        }
        if w.lambda2 > 0.0 {
            let dist = cocluster_distribution(
                base,
                &ctx.user.clusters.centroids,
                &ctx.item.clusters.centroids,
                batch.positive_pairs(),
            )?;
            let (l, g) = mi_loss(&dist, base.num_nodes());
            grads.add_scaled(&g, w.lambda2);
            parts.mi = l;
        }
    }

    if hp.lambda_reg > 0.0 {
        let (l, g) = reg_loss(base, &batch.touched_rows(base.num_users()), hp.lambda_reg)?;
        grads.add_scaled(&g, 1.0);
        parts.reg = l;
    }

    Ok((total_loss(parts, &w), grads))
}

#[cfg(test)]
mod tests {
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::backbone::forward;
    use crate::dataset::InteractionDataset;
    use crate::intents::{generate_targets, TargetParams};

    #[test]
    fn batch_collects_distinct_members() {
        let b = Batch::new(vec![(2, 0, 3), (0, 1, 3), (2, 0, 1)]);
        assert_eq!(b.users(), &[0, 2]);
        assert_eq!(b.items(), &[0, 1, 3]);
        assert_eq!(b.positive_pairs(), &[(0, 1), (2, 0)]);
        assert_eq!(b.touched_rows(5), vec![0, 2, 5, 6, 8]);
    }

    #[test]
    fn equal_scores_give_ln2_per_triple() {
        let ds = InteractionDataset::from_edges(1, 2, vec![(0, 0)]).unwrap();
        let adj = NormalizedAdjacency::build(&ds).unwrap();
        // both items identical so ŷ_ui = ŷ_uj
        let emb =
            EmbeddingTable::from_array(1, 2, array![[0.3, 0.1], [0.2, 0.5], [0.2, 0.5]]).unwrap();
        let trace = forward(&emb, &adj, 0, None).unwrap();
        let (loss, _) = bpr_loss(&trace, &adj, &Batch::new(vec![(0, 0, 1), (0, 0, 1)])).unwrap();
        assert!((loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn saturated_margin_has_negligible_loss() {
        let ds = InteractionDataset::from_edges(1, 2, vec![(0, 0)]).unwrap();
        let adj = NormalizedAdjacency::build(&ds).unwrap();
        let emb = EmbeddingTable::from_array(1, 2, array![[1.0], [50.0], [0.0]]).unwrap();
        let trace = forward(&emb, &adj, 0, None).unwrap();
        let (loss, _) = bpr_loss(&trace, &adj, &Batch::new(vec![(0, 0, 1)])).unwrap();
        assert!(loss < 1e-20);
    }

    #[test]
    fn ucl_orthogonal_member_gives_ln_c() {
        let ts = TargetSet {
            targets: array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]],
            temperature: 0.3,
            steps: 0,
            lr: 0.0,
        };
        let emb =
            EmbeddingTable::from_array(1, 1, array![[0.0, 0.0, 2.0], [1.0, 0.0, 0.0]]).unwrap();
        let a = Assignment {
            perm: vec![1, 0, 2],
            mean_similarity: 0.0,
        };
        let (loss, _) = ucl_loss(&emb, &[0], &[0], &a, &ts, 0.1, Side::User).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn ucl_saturated_softmax() {
        let ts = TargetSet {
            targets: array![[1.0, 0.0], [-1.0, 0.0]],
            temperature: 0.3,
            steps: 0,
            lr: 0.0,
        };
        let emb = EmbeddingTable::from_array(1, 1, array![[2.0, 0.0], [1.0, 0.0]]).unwrap();
        let a = Assignment {
            perm: vec![0, 1],
            mean_similarity: 1.0,
        };
        // z·t/τ = ±20
        let (loss, _) = ucl_loss(&emb, &[0], &[0], &a, &ts, 0.05, Side::Item).unwrap();
        assert!((loss - 4.248354255291589e-18).abs() < 1e-25, "{loss:e}");
    }

    #[test]
    fn ucl_rejects_non_positive_tau() {
        let ts = generate_targets(2, 2, TargetParams::default(), 1).unwrap();
        let emb = EmbeddingTable::from_array(1, 1, array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let a = Assignment {
            perm: vec![0, 1],
            mean_similarity: 0.0,
        };
        assert!(matches!(
            ucl_loss(&emb, &[0], &[0], &a, &ts, 0.0, Side::User),
            Err(Error::Config(_))
        ));
    }

    fn edgeless_trace(rows: Array2<f64>, num_users: usize) -> (ForwardTrace, NormalizedAdjacency) {
        let num_items = rows.nrows() - num_users;
        // a single edge between the last user and last item keeps the graph valid
        let ds = InteractionDataset::from_edges(
            num_users,
            num_items,
            vec![(num_users - 1, num_items - 1)],
        )
        .unwrap();
        let adj = NormalizedAdjacency::build(&ds).unwrap();
        let emb = EmbeddingTable::from_array(num_users, num_items, rows).unwrap();
        (forward(&emb, &adj, 1, None).unwrap(), adj)
    }

    #[test]
    fn ins_identical_members_give_ln_batch() {
        // users 0..3 are isolated, so layer 1 is zero; instead compare at layer 0 via
        // identical rows: give every member the same base row and the same neighbor
        let rows = array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0], [1.0, 2.0], [0.5, 0.5]];
        let ds =
            InteractionDataset::from_edges(4, 1, vec![(0, 0), (1, 0), (2, 0), (3, 0)]).unwrap();
        let adj = NormalizedAdjacency::build(&ds).unwrap();
        let emb = EmbeddingTable::from_array(4, 1, rows).unwrap();
        let trace = forward(&emb, &adj, 1, None).unwrap();
        let (loss, _) = ins_loss_layers(&trace, &[0, 1, 2, 3], 1, 0.2, Side::User).unwrap();
        assert!((loss - 4.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ins_closed_form_with_orthogonal_negatives() {
        // user 0 and its only item carry the same direction, so ẑ^(1) = ẑ^(0); the
        // other users point along orthogonal axes
        let rows = array![
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, 0.0, 1.0],
            [3.0, 0.0, 0.0, 0.0]
        ];
        let ds = InteractionDataset::from_edges(4, 2, vec![(0, 1), (3, 0)]).unwrap();
        let adj = NormalizedAdjacency::build(&ds).unwrap();
        let emb = EmbeddingTable::from_array(4, 2, rows).unwrap();
        let trace = forward(&emb, &adj, 1, None).unwrap();
        // only member 0 is scored against members {0, 1, 2}
        let (loss, _) = ins_loss_layers(&trace, &[0, 1, 2], 1, 1.0, Side::User).unwrap();
        let member0 = -(1f64.exp() / (1f64.exp() + 2.0)).ln();
        // members 1 and 2 are isolated: zero layer-1 rows give uniform logits
        let isolated = 3f64.ln();
        assert!((loss - (member0 + 2.0 * isolated)).abs() < 1e-12);
    }

    #[test]
    fn ins_single_member_is_zero() {
        let (trace, _) = edgeless_trace(array![[1.0, 0.0], [0.0, 1.0]], 1);
        let (loss, g) = ins_loss_layers(&trace, &[0], 1, 0.1, Side::User).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.layer(0).is_none() && g.layer(1).is_none());
    }

    #[test]
    fn ins_rejects_bad_layer() {
        let (trace, _) = edgeless_trace(array![[1.0, 0.0], [0.0, 1.0]], 1);
        assert!(ins_loss_layers(&trace, &[0], 0, 0.1, Side::User).is_err());
        assert!(ins_loss_layers(&trace, &[0], 2, 0.1, Side::User).is_err());
    }

    #[test]
    fn total_matches_arithmetic_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let mut r = || rng.random_range(-5.0..5.0);
            let parts = LossBreakdown {
                rec: r(),
                ucl_user: r(),
                ucl_item: r(),
                mi: r(),
                ins_user: r(),
                ins_item: r(),
                reg: r(),
                total: f64::NAN,
            };
            let w = LossWeights {
                lambda1: r().abs(),
                lambda2: r().abs(),
                lambda3: r().abs(),
                alpha: r().abs(),
            };
            let got = total_loss(parts, &w).total;
            let mut want = parts.rec;
            want += w.lambda1 * parts.ucl_user;
            want += w.lambda1 * w.alpha * parts.ucl_item;
            want += w.lambda2 * parts.mi;
            want += w.lambda3 * parts.ins_user;
            want += w.lambda3 * w.alpha * parts.ins_item;
            want += parts.reg;
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn ablation_and_warmup_identities() {
        let parts = LossBreakdown {
            rec: 1.5,
            ucl_user: 7.0,
            ucl_item: 3.0,
            mi: -0.4,
            ins_user: 2.0,
            ins_item: 1.0,
            reg: 0.0,
            total: 0.0,
        };
        let hp = Hyperparameters {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda_reg: 0.0,
            ..Default::default()
        };
        assert_eq!(total_loss(parts, &LossWeights::new(&hp, false)).total, 1.5);

        let w = LossWeights::new(&Hyperparameters::default(), true);
        let other = LossBreakdown {
            ucl_user: -100.0,
            ucl_item: 55.0,
            mi: 9.0,
            ..parts
        };
        assert_eq!(total_loss(parts, &w).total, total_loss(other, &w).total);
    }

    #[test]
    fn reg_counts_each_row_once() {
        let emb = EmbeddingTable::from_array(1, 1, array![[1.0, 2.0], [3.0, 0.0]]).unwrap();
        let (loss, g) = reg_loss(&emb, &[0, 1, 0], 0.5).unwrap();
        assert_eq!(loss, 0.5 * 14.0);
        assert_eq!(g.get(0).unwrap(), &[1.0, 2.0]);
        assert_eq!(g.get(1).unwrap(), &[3.0, 0.0]);
    }
}
