//! Base embeddings, noisy LightGCN propagation, mean readout, scoring, and the linear
//! pullback from layer gradients to base-embedding gradients.
//!
//! With noise treated as a constant, layer `l` is `Â^l E` plus an `E`-independent term,
//! so the gradient of any loss reaches the base table as `Σ_l Â^l g_l` (Â is symmetric).

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::NormalizedAdjacency;
use crate::objectives::GradBuffer;

/// Every tunable of the model and its optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparameters {
    pub dim: usize,
    pub layers: usize,
    /// Noise rate ε; zero disables perturbation.
    pub noise_rate: f64,
    pub tau: f64,
    /// Weight of the item-side terms of the intent and instance losses.
    pub alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda_reg: f64,
    pub user_intents: usize,
    pub item_intents: usize,
    /// Layer contrasted against layer 0 by the instance loss.
    pub ins_layer: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub seed: u64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 3,
            noise_rate: 2e-3,
            tau: 0.1,
            alpha: 1.0,
            lambda1: 1e-2,
            lambda2: 1e-3,
            lambda3: 1e-1,
            lambda_reg: 1e-4,
            user_intents: 1000,
            item_intents: 1000,
            ins_layer: 1,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 2048,
            epochs: 100,
            warmup_epochs: 5,
            seed: 42,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.dim == 0 {
            return fail("dim must be at least 1".into());
        }
        if !(self.tau > 0.0) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.noise_rate >= 0.0) {
            return fail(format!(
                "noise_rate must be non-negative, got {}",
                self.noise_rate
            ));
        }
        if self.ins_layer < 1 || self.ins_layer > self.layers {
            return fail(format!(
                "ins_layer must lie in 1..={}, got {}",
                self.layers, self.ins_layer
            ));
        }
        if self.user_intents < 2 || self.item_intents < 2 {
            return fail("user_intents and item_intents must be at least 2".into());
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda_reg", self.lambda_reg),
            ("alpha", self.alpha),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return fail(format!(
                    "{name} must be a finite non-negative number, got {v}"
                ));
            }
        }
        if !(self.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return fail("adam_eps must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        Ok(())
    }
}

/// Trainable layer-0 embeddings; rows `0..num_users` are users, the rest items.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    num_users: usize,
    num_items: usize,
    table: Array2<f64>,
}

impl EmbeddingTable {
    pub fn from_array(num_users: usize, num_items: usize, table: Array2<f64>) -> Result<Self> {
        if table.nrows() != num_users + num_items {
            return Err(Error::Shape(format!(
                "table has {} rows, expected {}",
                table.nrows(),
                num_users + num_items
            )));
        }
        if table.ncols() == 0 {
            return Err(Error::Shape(
                "embedding dimension must be at least 1".into(),
            ));
        }
        if let Some(pos) = table.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("in embedding entry {pos}")));
        }
        Ok(Self {
            num_users,
            num_items,
            table: table.as_standard_layout().into_owned(),
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn table(&self) -> &Array2<f64> {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut Array2<f64> {
        &mut self.table
    }

    pub fn users(&self) -> ArrayView2<'_, f64> {
        self.table.slice(ndarray::s![..self.num_users, ..])
    }

    pub fn items(&self) -> ArrayView2<'_, f64> {
        self.table.slice(ndarray::s![self.num_users.., ..])
    }

    pub fn row(&self, node: usize) -> &[f64] {
        let d = self.dim();
        &self.table.as_slice().expect("standard layout")[node * d..(node + 1) * d]
    }

    pub fn row_mut(&mut self, node: usize) -> &mut [f64] {
        let d = self.dim();
        &mut self.table.as_slice_mut().expect("standard layout")[node * d..(node + 1) * d]
    }
}

/// Xavier-uniform initialization on `[-√(6/2d), √(6/2d)]`.
pub fn init_embeddings(
    num_users: usize,
    num_items: usize,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingTable> {
    if num_users == 0 || num_items == 0 {
        return Err(Error::EmptyDataset);
    }
    let bound = (6.0 / (2.0 * dim as f64)).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = Array2::from_shape_simple_fn((num_users + num_items, dim), || {
        rng.random_range(-bound..=bound)
    });
    EmbeddingTable::from_array(num_users, num_items, table)
}

/// Where the per-node noise streams of one forward pass come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub rate: f64,
    pub seed: u64,
}

/// All intermediate quantities of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    num_users: usize,
    layers: Vec<Array2<f64>>,
    noise: Vec<Array2<f64>>,
    readout: Array2<f64>,
    noise_rate: f64,
}

impl ForwardTrace {
    pub fn num_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.readout.nrows() - self.num_users
    }

    pub fn dim(&self) -> usize {
        self.readout.ncols()
    }

    pub fn noise_rate(&self) -> f64 {
        self.noise_rate
    }

    /// Output of layer `l` (`l = 0` is the base table).
    pub fn layer(&self, l: usize) -> &Array2<f64> {
        &self.layers[l]
    }

    /// Noise added before propagating layer `l`, `None` when noise was off.
    pub fn noise(&self, l: usize) -> Option<&Array2<f64>> {
        self.noise.get(l)
    }

    pub fn readout(&self) -> &Array2<f64> {
        &self.readout
    }

    pub fn user_readout(&self, u: usize) -> ArrayView1<'_, f64> {
        self.readout.row(u)
    }

    pub fn item_readout(&self, i: usize) -> ArrayView1<'_, f64> {
        self.readout.row(self.num_users + i)
    }
}

/// Runs `Z^(l+1) = Â (Z^(l) + Δ^(l))` for `layers` steps and averages layers `0..=L`.
///
/// `Δ^(l)[m] = ε · X ⊙ sign(Z^(l)[m])` with `X ~ U(0,1)^d` drawn from a stream keyed by
/// `(layer, node)`, so the result does not depend on thread scheduling.
pub fn forward(
    emb: &EmbeddingTable,
    adj: &NormalizedAdjacency,
    layers: usize,
    noise: Option<NoiseSpec>,
) -> Result<ForwardTrace> {
    let n = adj.num_nodes();
    if emb.num_nodes() != n || emb.num_users() != adj.num_users() {
        return Err(Error::Shape(format!(
            "embedding table has {} rows, graph has {n} nodes",
            emb.num_nodes()
        )));
    }
    let noise = noise.filter(|s| s.rate > 0.0);
    let d = emb.dim();
    let mut outputs = Vec::with_capacity(layers + 1);
    let mut deltas = Vec::new();
    outputs.push(emb.table().clone());
    let mut readout = emb.table().clone();

    for l in 0..layers {
        let current = &outputs[l];
        let next = match noise {
            Some(spec) => {
                let delta = sample_noise(current, spec, l, n);
                let perturbed = current + &delta;
                deltas.push(delta);
                adj.multiply(perturbed.view())?
            }
            None => adj.multiply(current.view())?,
        };
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("in propagation layer {}", l + 1)));
        }
        readout += &next;
        outputs.push(next);
    }
    readout /= (layers + 1) as f64;

    debug_assert_eq!(readout.ncols(), d);
    Ok(ForwardTrace {
        num_users: emb.num_users(),
        layers: outputs,
        noise: deltas,
        readout,
        noise_rate: noise.map_or(0.0, |s| s.rate),
    })
}

fn sample_noise(z: &Array2<f64>, spec: NoiseSpec, layer: usize, n: usize) -> Array2<f64> {
    let d = z.ncols();
    let base = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut delta = Array2::zeros(z.dim());
    delta
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(z.axis_iter(Axis(0)))
        .enumerate()
        .for_each(|(node, (mut out, zrow))| {
            let mut rng = base.clone();
            rng.set_stream((layer * n + node) as u64);
            for j in 0..d {
                let x: f64 = rng.random();
                out[j] = spec.rate * x * sign(zrow[j]);
            }
        });
    delta
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn readout_row(trace: &ForwardTrace, node: usize) -> &[f64] {
    let d = trace.dim();
    &trace.readout.as_slice().expect("standard layout")[node * d..(node + 1) * d]
}

/// `ŷ(u, i) = ⟨z̄_u, z̄_i⟩` for every pair.
pub fn score_pairs(trace: &ForwardTrace, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
    let (nu, ni) = (trace.num_users(), trace.num_items());
    pairs
        .iter()
        .map(|&(u, i)| {
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
            Ok(dot(readout_row(trace, u), readout_row(trace, nu + i)))
        })
        .collect()
}

/// Scores of every item for each listed user, one row per user.
pub fn score_all(trace: &ForwardTrace, users: &[usize]) -> Result<Array2<f64>> {
    let (nu, ni) = (trace.num_users(), trace.num_items());
    if let Some(&u) = users.iter().find(|&&u| u >= nu) {
        return Err(Error::Bounds {
            index: u,
            limit: nu,
        });
    }
    let mut scores = Array2::zeros((users.len(), ni));
    scores
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(users.par_iter())
        .for_each(|(mut row, &u)| {
            let zu = readout_row(trace, u);
            for (i, s) in row.iter_mut().enumerate() {
                *s = dot(zu, readout_row(trace, nu + i));
            }
        });
    Ok(scores)
}

/// Gradients of a loss with respect to individual layer outputs and the readout.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    n: usize,
    d: usize,
    layers: Vec<Option<Array2<f64>>>,
    readout: Option<Array2<f64>>,
}

impl LayerGrads {
    pub fn new(num_nodes: usize, dim: usize, num_layers: usize) -> Self {
        Self {
            n: num_nodes,
            d: dim,
            layers: vec![None; num_layers + 1],
            readout: None,
        }
    }

    pub fn for_trace(trace: &ForwardTrace) -> Self {
        Self::new(trace.readout.nrows(), trace.dim(), trace.num_layers())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn layer_row_mut(&mut self, l: usize, node: usize) -> ndarray::ArrayViewMut1<'_, f64> {
        let (n, d) = (self.n, self.d);
        self.layers[l]
            .get_or_insert_with(|| Array2::zeros((n, d)))
            .row_mut(node)
    }

    pub fn readout_row_mut(&mut self, node: usize) -> ndarray::ArrayViewMut1<'_, f64> {
        let (n, d) = (self.n, self.d);
        self.readout
            .get_or_insert_with(|| Array2::zeros((n, d)))
            .row_mut(node)
    }

    pub fn layer(&self, l: usize) -> Option<&Array2<f64>> {
        self.layers[l].as_ref()
    }

    pub fn readout(&self) -> Option<&Array2<f64>> {
        self.readout.as_ref()
    }

    /// Adds a base-table gradient as a layer-0 contribution.
    pub fn add_base(&mut self, grads: &GradBuffer, scale: f64) {
        for (r, values) in grads.iter() {
            let mut row = self.layer_row_mut(0, r);
            for (o, v) in row.iter_mut().zip(values) {
                *o += scale * v;
            }
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &LayerGrads, scale: f64) {
        assert_eq!(
            (self.n, self.d, self.layers.len()),
            (other.n, other.d, other.layers.len())
        );
        let (n, d) = (self.n, self.d);
        for (mine, theirs) in self.layers.iter_mut().zip(&other.layers) {
            if let Some(g) = theirs {
                mine.get_or_insert_with(|| Array2::zeros((n, d)))
                    .scaled_add(scale, g);
            }
        }
        if let Some(g) = &other.readout {
            self.readout
                .get_or_insert_with(|| Array2::zeros((n, d)))
                .scaled_add(scale, g);
        }
    }
}

/// Maps layer and readout gradients back to the base table: `Σ_l Â^l (g_l + ḡ/(L+1))`.
///
/// Evaluated Horner-style from the deepest contributing layer, costing one sparse
/// product per layer. Noise receives no gradient.
pub fn pullback(adj: &NormalizedAdjacency, grads: &LayerGrads) -> Result<GradBuffer> {
    let n = adj.num_nodes();
    if grads.n != n {
        return Err(Error::Shape(format!(
            "gradients have {} rows, graph has {n} nodes",
            grads.n
        )));
    }
    let num_layers = grads.num_layers();
    let readout_share = grads.readout.as_ref().map(|g| g / (num_layers + 1) as f64);

    let contribution = |l: usize| -> Option<Array2<f64>> {
        match (&grads.layers[l], &readout_share) {
            (Some(g), Some(r)) => Some(g + r),
            (Some(g), None) => Some(g.clone()),
            (None, Some(r)) => Some(r.clone()),
            (None, None) => None,
        }
    };

    let Some(top) = (0..=num_layers)
        .rev()
        .find(|&l| grads.layers[l].is_some() || readout_share.is_some())
    else {
        return Ok(GradBuffer::new(n, grads.d));
    };
    let mut acc = contribution(top).expect("top layer contributes");
    let mut scratch = Array2::zeros((n, grads.d));
    for l in (0..top).rev() {
        adj.multiply_into(acc.view(), &mut scratch)?;
        std::mem::swap(&mut acc, &mut scratch);
        if let Some(h) = contribution(l) {
            acc += &h;
        }
    }
    Ok(GradBuffer::from_dense(&acc))
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    use super::*;
    use crate::dataset::InteractionDataset;

    fn single_edge() -> NormalizedAdjacency {
        NormalizedAdjacency::build(&InteractionDataset::from_edges(1, 1, vec![(0, 0)]).unwrap())
            .unwrap()
    }

    fn random_graph(seed: u64, nu: usize, ni: usize, m: usize) -> NormalizedAdjacency {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let edges = (0..m)
            .map(|_| (rng.random_range(0..nu), rng.random_range(0..ni)))
            .collect();
        NormalizedAdjacency::build(&InteractionDataset::from_edges(nu, ni, edges).unwrap()).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_embeddings(10, 20, 64, 7).unwrap();
        let b = init_embeddings(10, 20, 64, 7).unwrap();
        assert_eq!(a, b);
        let bound = (6.0f64 / 128.0).sqrt();
        assert_abs_diff_eq!(bound, 0.2165, epsilon = 1e-4);
        assert!(a.table().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn init_mean_is_near_zero() {
        let emb = init_embeddings(500, 500, 1000, 3).unwrap();
        let mean = emb.table().mean().unwrap();
        assert!(mean.abs() < 1e-3, "mean {mean}");
    }

    #[test]
    fn single_edge_one_layer_readout() {
        let adj = single_edge();
        let emb = EmbeddingTable::from_array(1, 1, array![[1.0, 2.0], [3.0, -4.0]]).unwrap();
        let trace = forward(&emb, &adj, 1, None).unwrap();
        assert_eq!(trace.user_readout(0), array![2.0, -1.0]);
    }

    #[test]
    fn eigenvector_is_fixed_point_of_readout() {
        // complete 2x2 bipartite graph: every node has degree 2, Â·1 = 1
        let ds =
            InteractionDataset::from_edges(2, 2, vec![(0, 0), (0, 1), (1, 0), (1, 1)]).unwrap();
        let adj = NormalizedAdjacency::build(&ds).unwrap();
        let v = array![0.5, -1.5, 2.0];
        let table = Array2::from_shape_fn((4, 3), |(_, j)| v[j]);
        let emb = EmbeddingTable::from_array(2, 2, table).unwrap();
        let trace = forward(&emb, &adj, 2, None).unwrap();
        for r in trace.readout().rows() {
            for (a, b) in r.iter().zip(v.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn zero_rate_equals_noise_off() {
        let adj = random_graph(1, 8, 9, 30);
        let emb = init_embeddings(8, 9, 4, 1).unwrap();
        let a = forward(&emb, &adj, 3, Some(NoiseSpec { rate: 0.0, seed: 5 })).unwrap();
        let b = forward(&emb, &adj, 3, None).unwrap();
        assert_eq!(a.readout(), b.readout());
        assert!(a.noise(0).is_none());
    }

    #[test]
    fn noise_is_bounded_and_sign_aligned() {
        let adj = random_graph(2, 10, 12, 50);
        let emb = init_embeddings(10, 12, 6, 2).unwrap();
        let eps = 0.05;
        let trace = forward(
            &emb,
            &adj,
            3,
            Some(NoiseSpec {
                rate: eps,
                seed: 11,
            }),
        )
        .unwrap();
        for l in 0..3 {
            let delta = trace.noise(l).unwrap();
            for (dv, zv) in delta.iter().zip(trace.layer(l).iter()) {
                assert!(dv.abs() <= eps);
                assert!(dv * zv >= 0.0);
            }
        }
        let again = forward(
            &emb,
            &adj,
            3,
            Some(NoiseSpec {
                rate: eps,
                seed: 11,
            }),
        )
        .unwrap();
        assert_eq!(trace.readout(), again.readout());
    }

    #[test]
    fn readout_is_linear_in_parameters() {
        let adj = random_graph(3, 7, 5, 20);
        let emb = init_embeddings(7, 5, 3, 3).unwrap();
        let scaled = EmbeddingTable::from_array(7, 5, emb.table() * 2.5).unwrap();
        let a = forward(&emb, &adj, 3, None).unwrap();
        let b = forward(&scaled, &adj, 3, None).unwrap();
        for (x, y) in a.readout().iter().zip(b.readout().iter()) {
            assert_abs_diff_eq!(2.5 * x, y, epsilon = 1e-10);
        }
    }

    #[test]
    fn scoring() {
        let adj = single_edge();
        let emb = EmbeddingTable::from_array(1, 1, array![[1.0, 0.0], [0.5, 2.0]]).unwrap();
        let trace = forward(&emb, &adj, 0, None).unwrap();
        assert_eq!(score_pairs(&trace, &[(0, 0)]).unwrap(), vec![0.5]);
        assert!(matches!(
            score_pairs(&trace, &[(1, 0)]),
            Err(Error::Bounds { .. })
        ));
        assert!(matches!(score_all(&trace, &[3]), Err(Error::Bounds { .. })));
    }

    #[test]
    fn score_all_agrees_with_pairs_exactly() {
        let adj = random_graph(4, 6, 9, 25);
        let emb = init_embeddings(6, 9, 5, 4).unwrap();
        let trace = forward(&emb, &adj, 2, None).unwrap();
        let users = [0, 3, 5];
        let all = score_all(&trace, &users).unwrap();
        for (row, &u) in all.rows().into_iter().zip(&users) {
            let pairs: Vec<_> = (0..9).map(|i| (u, i)).collect();
            let pair_scores = score_pairs(&trace, &pairs).unwrap();
            assert!(row
                .iter()
                .zip(&pair_scores)
                .all(|(a, b)| a.to_bits() == b.to_bits()));
            let best = (0..9)
                .max_by(|&a, &b| pair_scores[a].total_cmp(&pair_scores[b]).then(b.cmp(&a)))
                .unwrap();
            let argmax = (0..9)
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                .unwrap();
            assert_eq!(best, argmax);
        }
    }

    #[test]
    fn pullback_of_layer_zero_is_identity() {
        let adj = random_graph(5, 4, 4, 10);
        let mut grads = LayerGrads::new(8, 2, 3);
        grads.layer_row_mut(0, 2).assign(&array![1.0, -2.0]);
        let g = pullback(&adj, &grads).unwrap();
        assert_eq!(g.rows(), &[2]);
        assert_eq!(g.get(2), Some(&[1.0, -2.0][..]));
    }

    #[test]
    fn pullback_on_edgeless_graph_returns_readout_share() {
        // Only a single edge between u0 and i0; nodes u1 and i1 are isolated, so a
        // readout gradient on u1 only survives through the layer-0 path.
        let ds = InteractionDataset::from_edges(2, 2, vec![(0, 0)]).unwrap();
        let adj = NormalizedAdjacency::build(&ds).unwrap();
        let mut grads = LayerGrads::new(4, 2, 3);
        grads.readout_row_mut(1).assign(&array![4.0, 8.0]);
        let g = pullback(&adj, &grads).unwrap();
        assert_eq!(g.get(1), Some(&[1.0, 2.0][..]));
        assert_eq!(g.len(), 1);
    }
}
