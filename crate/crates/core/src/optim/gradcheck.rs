//! Gradient self-check on small random problems.
//!
//! Each instance is a random bipartite graph with at most 19 nodes, `d ≤ 8`, one to
//! three layers, a random batch and random intents with `C ≤ 4` per side. Every loss
//! term is compared against central differences with noise off.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{
    forward, init_embeddings, pullback, EmbeddingTable, ForwardTrace, Hyperparameters, LayerGrads,
};
use crate::dataset::InteractionDataset;
use crate::error::Result;
use crate::graph::NormalizedAdjacency;
use crate::intents::{
    assign_targets, generate_targets, Assignment, Centroids, TargetParams, TargetSet,
};
use crate::objectives::{
    bpr_loss, cocluster_distribution, ins_loss, joint_objective, mi_loss, mutual_information,
    ucl_loss, Batch, IntentContext, Side, SideIntents,
};

use super::{finite_diff_check, GradCheck};

/// Temperature used by every contrastive term of the check.
pub const CHECK_TAU: f64 = 0.5;

pub struct Instance {
    pub train: InteractionDataset,
    pub adj: NormalizedAdjacency,
    pub emb: EmbeddingTable,
    pub batch: Batch,
    pub layers: usize,
    pub user: (Centroids, TargetSet, Assignment),
    pub item: (Centroids, TargetSet, Assignment),
}

impl Instance {
    pub fn trace(&self, emb: &EmbeddingTable) -> ForwardTrace {
        forward(emb, &self.adj, self.layers, None).expect("instance shapes agree")
    }

    pub fn intents(&self) -> IntentContext<'_> {
        IntentContext {
            user: SideIntents {
                clusters: &self.user.0,
                targets: &self.user.1,
                assignment: &self.user.2,
            },
            item: SideIntents {
                clusters: &self.item.0,
                targets: &self.item.1,
                assignment: &self.item.2,
            },
        }
    }

    pub fn all_rows(&self) -> Vec<usize> {
        (0..self.emb.num_nodes()).collect()
    }

    /// Hyperparameters with every term switched on and noise off.
    pub fn hyperparameters(&self) -> Hyperparameters {
        Hyperparameters {
            dim: self.emb.dim(),
            layers: self.layers,
            noise_rate: 0.0,
            tau: CHECK_TAU,
            alpha: 0.7,
            lambda1: 0.3,
            lambda2: 0.8,
            lambda3: 0.4,
            lambda_reg: 0.05,
            ins_layer: self.layers,
            ..Default::default()
        }
    }

    fn side(&self, side: Side) -> &(Centroids, TargetSet, Assignment) {
        match side {
            Side::User => &self.user,
            Side::Item => &self.item,
        }
    }
}

fn random_clusters(rng: &mut ChaCha8Rng, members: usize, c: usize, d: usize) -> Centroids {
    let centroids = Array2::from_shape_simple_fn((c, d), || rng.random_range(-1.0..1.0));
    let labels = (0..members).map(|_| rng.random_range(0..c)).collect();
    Centroids {
        centroids,
        labels,
        inertia: 0.0,
        history: vec![],
    }
}

/// A random instance for `seed`.
///
/// Draws are repeated until the co-cluster joint carries some mutual information:
/// at zero MI the gradient vanishes and finite differences only see roundoff.
pub fn random_instance(seed: u64) -> Result<Instance> {
    for attempt in 0u64.. {
        let inst = draw_instance(seed.wrapping_add(attempt << 32))?;
        let dist = cocluster_distribution(
            &inst.emb,
            &inst.user.0.centroids,
            &inst.item.0.centroids,
            inst.batch.positive_pairs(),
        )?;
        if mutual_information(&dist.joint) > 1e-3 {
            return Ok(inst);
        }
    }
    unreachable!("attempt counter is unbounded")
}

fn draw_instance(seed: u64) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nu = rng.random_range(4..=9);
    let ni = rng.random_range(4..=10);
    let d = rng.random_range(2..=8);
    let layers = rng.random_range(1..=3);
    let mut edges = Vec::new();
    for u in 0..nu {
        for i in 0..ni {
            if rng.random_bool(0.35) {
                edges.push((u, i));
            }
        }
    }
    // every user keeps at least one positive and one negative
    for u in 0..nu {
        if !edges.iter().any(|&(x, _)| x == u) {
            edges.push((u, rng.random_range(0..ni)));
        }
        if edges.iter().filter(|&&(x, _)| x == u).count() == ni {
            edges.retain(|&e| e != (u, ni - 1));
        }
    }
    let train = InteractionDataset::from_edges(nu, ni, edges)?;
    let adj = NormalizedAdjacency::build(&train)?;
    let mut emb = init_embeddings(nu, ni, d, seed)?;
    // entries in ±1/√d keep row norms near 1, so no softmax saturates
    let bound = (3.0 / d as f64).sqrt();
    emb.table_mut()
        .mapv_inplace(|v| v / bound / (d as f64).sqrt());

    let mut triples = Vec::new();
    for _ in 0..rng.random_range(3..=8) {
        let (u, i) = train.edges()[rng.random_range(0..train.num_edges())];
        let j = loop {
            let j = rng.random_range(0..ni);
            if !train.contains(u, j) {
                break j;
            }
        };
        triples.push((u, i, j));
    }
    let batch = Batch::new(triples);

    let mut side = |members: usize| -> Result<_> {
        let c = rng.random_range(2..=4);
        let targets = generate_targets(
            c,
            d,
            TargetParams {
                steps: 200,
                ..Default::default()
            },
            rng.random(),
        )?;
        let clusters = random_clusters(&mut rng, members, c, d);
        let assignment = assign_targets(&clusters, &targets)?;
        Ok((clusters, targets, assignment))
    };
    let user = side(nu)?;
    let item = side(ni)?;
    Ok(Instance {
        train,
        adj,
        emb,
        batch,
        layers,
        user,
        item,
    })
}

/// One checked quantity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Rec,
    UclUser,
    UclItem,
    Mi,
    InsUser,
    InsItem,
    Joint,
    /// A fixed random functional of every layer and the readout, through the pullback.
    Pullback,
}

impl Term {
    pub const ALL: [Term; 8] = [
        Term::Rec,
        Term::UclUser,
        Term::UclItem,
        Term::Mi,
        Term::InsUser,
        Term::InsItem,
        Term::Joint,
        Term::Pullback,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::Rec => "rec",
            Term::UclUser => "ucl_user",
            Term::UclItem => "ucl_item",
            Term::Mi => "mi",
            Term::InsUser => "ins_user",
            Term::InsItem => "ins_item",
            Term::Joint => "joint",
            Term::Pullback => "pullback",
        }
    }

    /// Largest accepted relative error.
    pub fn tolerance(self) -> f64 {
        match self {
            Term::Mi | Term::Joint => 1e-4,
            _ => 1e-5,
        }
    }

    /// Central-difference step. BPR and the quadratic pullback functional have little
    /// curvature, so a wider step cuts roundoff at no truncation cost.
    pub fn step(self) -> f64 {
        match self {
            Term::Rec => 1e-4,
            Term::Pullback => 1e-3,
            _ => 1e-5,
        }
    }
}

/// Worst coordinate of `term` on one instance.
pub fn check_term(term: Term, inst: &Instance) -> Result<GradCheck> {
    let rows = inst.all_rows();
    let h = term.step();
    let check =
        |f: &dyn Fn(&EmbeddingTable) -> Result<(f64, crate::GradBuffer)>| -> Result<GradCheck> {
            let (_, g) = f(&inst.emb)?;
            Ok(finite_diff_check(
                |e| f(e).map_or(f64::NAN, |r| r.0),
                &inst.emb,
                &g,
                h,
                &rows,
            ))
        };
    match term {
        Term::Rec => check(&|e| bpr_loss(&inst.trace(e), &inst.adj, &inst.batch)),
        Term::UclUser | Term::UclItem => {
            let side = if term == Term::UclUser {
                Side::User
            } else {
                Side::Item
            };
            let (clusters, targets, assignment) = inst.side(side);
            let members = inst.batch.members(side);
            check(&|e| {
                ucl_loss(
                    e,
                    members,
                    &clusters.labels,
                    assignment,
                    targets,
                    CHECK_TAU,
                    side,
                )
            })
        }
        Term::Mi => check(&|e| {
            let dist = cocluster_distribution(
                e,
                &inst.user.0.centroids,
                &inst.item.0.centroids,
                inst.batch.positive_pairs(),
            )?;
            Ok(mi_loss(&dist, e.num_nodes()))
        }),
        Term::InsUser | Term::InsItem => {
            let side = if term == Term::InsUser {
                Side::User
            } else {
                Side::Item
            };
            let members = inst.batch.members(side);
            check(&|e| {
                ins_loss(
                    &inst.trace(e),
                    &inst.adj,
                    members,
                    inst.layers,
                    CHECK_TAU,
                    side,
                )
            })
        }
        Term::Joint => {
            let hp = inst.hyperparameters();
            let intents = inst.intents();
            check(&|e| {
                let (parts, g) = joint_objective(
                    e,
                    &inst.adj,
                    &inst.trace(e),
                    &inst.batch,
                    Some(&intents),
                    &hp,
                    false,
                )?;
                Ok((parts.total, g))
            })
        }
        Term::Pullback => check_pullback(inst),
    }
}

/// `Σ_l ⟨W_l, Z^(l)⟩ + ⟨W̄, Z̄⟩ + ½‖Z^(L)‖²` with random weights.
fn check_pullback(inst: &Instance) -> Result<GradCheck> {
    let (n, d, layers) = (inst.emb.num_nodes(), inst.emb.dim(), inst.layers);
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64 * 31 + d as u64);
    let weights: Vec<Array2<f64>> = (0..=layers + 1)
        .map(|_| Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0)))
        .collect();
    let loss = |e: &EmbeddingTable| {
        let t = inst.trace(e);
        let linear: f64 = (0..=layers).map(|l| (t.layer(l) * &weights[l]).sum()).sum();
        linear
            + (t.readout() * &weights[layers + 1]).sum()
            + 0.5 * t.layer(layers).iter().map(|x| x * x).sum::<f64>()
    };
    let t = inst.trace(&inst.emb);
    let mut g = LayerGrads::for_trace(&t);
    for (l, w) in weights.iter().enumerate().take(layers + 1) {
        for r in 0..n {
            let mut row = g.layer_row_mut(l, r);
            row += &w.row(r);
            if l == layers {
                row += &t.layer(l).row(r);
            }
        }
    }
    for r in 0..n {
        let mut row = g.readout_row_mut(r);
        row += &weights[layers + 1].row(r);
    }
    let analytic = pullback(&inst.adj, &g)?;
    Ok(finite_diff_check(
        loss,
        &inst.emb,
        &analytic,
        Term::Pullback.step(),
        &inst.all_rows(),
    ))
}

/// Worst result of one term over a run of instances.
#[derive(Debug, Clone, Serialize)]
pub struct TermReport {
    pub term: Term,
    pub tolerance: f64,
    pub instances: usize,
    pub max_rel_error: f64,
    /// Instance seed, row and column of the worst coordinate.
    pub worst_seed: u64,
    pub worst_row: usize,
    pub worst_col: usize,
}

impl TermReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Checks every term on instances `seed..seed + instances`.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<TermReport>> {
    let mut reports: Vec<TermReport> = Term::ALL
        .iter()
        .map(|&term| TermReport {
            term,
            tolerance: term.tolerance(),
            instances,
            max_rel_error: 0.0,
            worst_seed: seed,
            worst_row: 0,
            worst_col: 0,
        })
        .collect();
    for s in seed..seed + instances as u64 {
        let inst = random_instance(s)?;
        for report in &mut reports {
            let c = check_term(report.term, &inst)?;
            if c.max_rel_error > report.max_rel_error || c.max_rel_error.is_nan() {
                report.max_rel_error = c.max_rel_error;
                report.worst_seed = s;
                report.worst_row = c.row;
                report.worst_col = c.col;
            }
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instances_respect_the_size_limits() {
        for seed in 0..20 {
            let inst = random_instance(seed).unwrap();
            assert!(inst.emb.num_nodes() <= 20 && inst.emb.dim() <= 8);
            assert!(inst.user.1.len() <= 4 && inst.item.1.len() <= 4);
            assert!(!inst.batch.is_empty());
        }
    }

    #[test]
    fn short_suite_passes() {
        let reports = gradient_suite(3, 100).unwrap();
        assert_eq!(reports.len(), Term::ALL.len());
        for r in reports {
            assert!(r.passed(), "{r:?}");
        }
    }
}
