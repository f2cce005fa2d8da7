//! Lazy sparse Adam over the embedding table, and the central finite-difference
//! checker used to validate every hand-derived gradient.

pub mod gradcheck;

use ndarray::Array2;

use crate::backbone::{EmbeddingTable, Hyperparameters};
use crate::error::{Error, Result};
use crate::objectives::GradBuffer;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn from_hyperparameters(hp: &Hyperparameters) -> Self {
        Self {
            lr: hp.lr,
            beta1: hp.beta1,
            beta2: hp.beta2,
            eps: hp.adam_eps,
        }
    }
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments plus a step counter per row.
///
/// Rows absent from a step keep their moments and their counter, so bias correction
/// follows how often each row has actually been updated.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Array2<f64>,
    pub v: Array2<f64>,
    pub t: Vec<u64>,
}

impl AdamState {
    pub fn new(num_rows: usize, dim: usize) -> Self {
        Self {
            m: Array2::zeros((num_rows, dim)),
            v: Array2::zeros((num_rows, dim)),
            t: vec![0; num_rows],
        }
    }

    pub fn for_table(emb: &EmbeddingTable) -> Self {
        Self::new(emb.num_nodes(), emb.dim())
    }
}

/// One Adam update of the rows present in `grads`.
///
/// The whole buffer is checked before anything is written, so a non-finite gradient
/// leaves both the table and the state untouched.
pub fn adam_step(
    state: &mut AdamState,
    emb: &mut EmbeddingTable,
    grads: &GradBuffer,
    p: AdamParams,
) -> Result<()> {
    if !(p.lr > 0.0) || !(0.0..1.0).contains(&p.beta1) || !(0.0..1.0).contains(&p.beta2) {
        return Err(Error::Config(format!("invalid Adam parameters {p:?}")));
    }
    if grads.dim() != emb.dim()
        || grads.num_rows() != emb.num_nodes()
        || state.t.len() != emb.num_nodes()
    {
        return Err(Error::Shape(
            "gradient buffer, optimizer state and table disagree".into(),
        ));
    }
    if let Some((row, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric(format!("in the gradient of row {row}")));
    }
    for (row, g) in grads.iter() {
        state.t[row] += 1;
        let t = state.t[row] as i32;
        let c1 = 1.0 - p.beta1.powi(t);
        let c2 = 1.0 - p.beta2.powi(t);
        let mut m = state.m.row_mut(row);
        let mut v = state.v.row_mut(row);
        let e = emb.row_mut(row);
        for j in 0..g.len() {
            m[j] = p.beta1 * m[j] + (1.0 - p.beta1) * g[j];
            v[j] = p.beta2 * v[j] + (1.0 - p.beta2) * g[j] * g[j];
            e[j] -= p.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + p.eps);
        }
    }
    Ok(())
}

/// Worst coordinate found by [`finite_diff_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Compares `analytic` to central differences `(f(x+h) - f(x-h)) / 2h` on every
/// coordinate of `rows`. Rows missing from `analytic` count as zero gradient.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<F>(
    mut loss: F,
    emb: &EmbeddingTable,
    analytic: &GradBuffer,
    h: f64,
    rows: &[usize],
) -> GradCheck
where
    F: FnMut(&EmbeddingTable) -> f64,
{
    let mut probe = emb.clone();
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        row: 0,
        col: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    for &r in rows {
        for c in 0..emb.dim() {
            let x = emb.row(r)[c];
            probe.row_mut(r)[c] = x + h;
            let up = loss(&probe);
            probe.row_mut(r)[c] = x - h;
            let down = loss(&probe);
            probe.row_mut(r)[c] = x;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(r).map_or(0.0, |g| g[c]);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst.coordinates += 1;
            if err > worst.max_rel_error || err.is_nan() {
                worst = GradCheck {
                    max_rel_error: err,
                    row: r,
                    col: c,
                    analytic: a,
                    numeric,
                    ..worst
                };
            }
        }
    }
    worst
}
