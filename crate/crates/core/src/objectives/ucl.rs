use crate::backbone::{dot, EmbeddingTable};
use crate::error::{Error, Result};
use crate::intents::{Assignment, TargetSet};

use super::{GradBuffer, Side};

/// InfoNCE of each member's base embedding against the target assigned to its
/// cluster, with every target of that side in the denominator.
///
/// `members` and `labels` are side-local indices; the gradient is keyed by node row.
pub fn ucl_loss(
    base: &EmbeddingTable,
    members: &[usize],
    labels: &[usize],
    assignment: &Assignment,
    targets: &TargetSet,
    tau: f64,
    side: Side,
) -> Result<(f64, GradBuffer)> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if targets.dim() != base.dim() {
        return Err(Error::Shape(format!(
            "targets have dim {}, embeddings {}",
            targets.dim(),
            base.dim()
        )));
    }
    let side_len = side.len(base.num_users(), base.num_items());
    if labels.len() != side_len {
        return Err(Error::Shape(format!(
            "{} labels for {side_len} {side} rows",
            labels.len()
        )));
    }
    let c = targets.len();
    if assignment.perm.len() != c {
        return Err(Error::Shape(format!(
            "assignment covers {} clusters, {c} targets",
            assignment.perm.len()
        )));
    }
    let t = targets.targets.as_standard_layout();
    let t = t.as_slice().expect("standard layout");
    let d = base.dim();
    let offset = side.offset(base.num_users());

    let mut grads = GradBuffer::new(base.num_nodes(), d);
    let mut logits = vec![0.0; c];
    let mut loss = 0.0;
    for &m in members {
        if m >= side_len {
            return Err(Error::Bounds {
                index: m,
                limit: side_len,
            });
        }
        let positive = assignment.target_of(labels[m]);
        let z = base.row(offset + m);
        for (k, l) in logits.iter_mut().enumerate() {
            *l = dot(z, &t[k * d..(k + 1) * d]) / tau;
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        loss += nll(&logits, positive);

        // ∂/∂z = (Σ_k p_k t_k - t_pos) / τ
        let g = grads.row_mut(offset + m);
        for (k, l) in logits.iter().enumerate() {
            let p = (l - lse).exp() - if k == positive { 1.0 } else { 0.0 };
            for (gj, tj) in g.iter_mut().zip(&t[k * d..(k + 1) * d]) {
                *gj += p * tj / tau;
            }
        }
    }
    Ok((loss, grads))
}

/// `LSE(l) - l_pos` evaluated relative to the positive logit, so a saturated softmax
/// keeps its tiny loss instead of rounding to zero.
pub(crate) fn nll(logits: &[f64], positive: usize) -> f64 {
    let lp = logits[positive];
    let shift = logits.iter().map(|l| l - lp).fold(0.0, f64::max);
    let others: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != positive)
        .map(|(_, l)| (l - lp - shift).exp())
        .sum();
    if shift == 0.0 {
        others.ln_1p()
    } else {
        shift + ((-shift).exp() + others).ln()
    }
}
