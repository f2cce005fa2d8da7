use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Fixed unit-norm targets, one row per intent.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    pub targets: Array2<f64>,
    pub temperature: f64,
    pub steps: usize,
    pub lr: f64,
}

impl TargetSet {
    pub fn len(&self) -> usize {
        self.targets.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.targets.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetParams {
    pub temperature: f64,
    pub steps: usize,
    pub lr: f64,
}

impl Default for TargetParams {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            steps: 2000,
            lr: 0.1,
        }
    }
}

const MAX_TARGETS: usize = 1_000_000;

/// Uniformity loss `(1/C) Σ_i log Σ_j exp(t_i·t_j / τ)`.
pub fn uniformity_loss(targets: &Array2<f64>, temperature: f64) -> f64 {
    let c = targets.nrows();
    let gram = targets.dot(&targets.t()) / temperature;
    gram.rows()
        .into_iter()
        .map(|row| {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
        })
        .sum::<f64>()
        / c as f64
}

/// Spreads `count` targets over the unit sphere in `dim` dimensions by projected
/// gradient descent on [`uniformity_loss`].
pub fn generate_targets(
    count: usize,
    dim: usize,
    params: TargetParams,
    seed: u64,
) -> Result<TargetSet> {
    if count < 2 || dim < 2 {
        return Err(Error::Config(format!(
            "need at least 2 targets in at least 2 dimensions, got {count}x{dim}"
        )));
    }
    if count > MAX_TARGETS {
        return Err(Error::Config(format!(
            "{count} targets exceeds the limit of {MAX_TARGETS}"
        )));
    }
    if !(params.temperature > 0.0) || !(params.lr > 0.0) {
        return Err(Error::Config(
            "target temperature and learning rate must be positive".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Array2::from_shape_simple_fn((count, dim), || StandardNormal.sample(&mut rng));
    normalize_rows(&mut t);

    let tau = params.temperature;
    let scale = 1.0 / (count as f64 * tau);
    for _ in 0..params.steps {
        let mut p = t.dot(&t.t()) / tau;
        for mut row in p.axis_iter_mut(Axis(0)) {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let total = row.sum();
            row /= total;
        }
        // d/dt_i = (1/(Cτ)) Σ_j (P_ij + P_ji) t_j
        let sym = &p + &p.t();
        let grad = sym.dot(&t) * scale;
        t.scaled_add(-params.lr, &grad);
        normalize_rows(&mut t);
    }

    Ok(TargetSet {
        targets: t,
        temperature: tau,
        steps: params.steps,
        lr: params.lr,
    })
}

fn normalize_rows(m: &mut Array2<f64>) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
}
