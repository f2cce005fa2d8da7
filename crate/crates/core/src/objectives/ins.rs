use ndarray::{Array2, Axis};

use crate::backbone::{pullback, ForwardTrace, LayerGrads};
use crate::error::{Error, Result};
use crate::graph::NormalizedAdjacency;

use super::{GradBuffer, Side};

/// Cross-layer InfoNCE: each member's normalized layer-`k` output against the
/// normalized layer-0 outputs of every member of the same side (itself included).
///
/// Returns gradients on layer `k` and layer 0; a single member contributes nothing.
pub fn ins_loss_layers(
    trace: &ForwardTrace,
    members: &[usize],
    layer: usize,
    tau: f64,
    side: Side,
) -> Result<(f64, LayerGrads)> {
    if layer < 1 || layer > trace.num_layers() {
        return Err(Error::Config(format!(
            "contrast layer must lie in 1..={}, got {layer}",
            trace.num_layers()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let side_len = side.len(trace.num_users(), trace.num_items());
    if let Some(&m) = members.iter().find(|&&m| m >= side_len) {
        return Err(Error::Bounds {
            index: m,
            limit: side_len,
        });
    }
    let mut grads = LayerGrads::for_trace(trace);
    if members.len() < 2 {
        log::warn!(
            "instance contrast over {} member(s); loss is 0",
            members.len()
        );
        return Ok((0.0, grads));
    }

    let offset = side.offset(trace.num_users());
    let nodes: Vec<usize> = members.iter().map(|&m| offset + m).collect();
    let deep = trace.layer(layer).select(Axis(0), &nodes);
    let shallow = trace.layer(0).select(Axis(0), &nodes);
    let (q, q_norm) = unit_rows(deep);
    let (r, r_norm) = unit_rows(shallow);

    let mut probs = q.dot(&r.t()) / tau;
    let mut loss = 0.0;
    for (a, mut row) in probs.axis_iter_mut(Axis(0)).enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[a];
        row.mapv_inplace(|v| (v - lse).exp());
        row[a] -= 1.0;
    }
    // probs now holds ∂loss/∂logits
    let d_q = probs.dot(&r) / tau;
    let d_r = probs.t().dot(&q) / tau;

    for (s, &node) in nodes.iter().enumerate() {
        add_unnormalized(&mut grads.layer_row_mut(layer, node), &q, &d_q, &q_norm, s);
        add_unnormalized(&mut grads.layer_row_mut(0, node), &r, &d_r, &r_norm, s);
    }
    Ok((loss, grads))
}

/// [`ins_loss_layers`] pulled back to the base embeddings.
pub fn ins_loss(
    trace: &ForwardTrace,
    adj: &NormalizedAdjacency,
    members: &[usize],
    layer: usize,
    tau: f64,
    side: Side,
) -> Result<(f64, GradBuffer)> {
    let (loss, grads) = ins_loss_layers(trace, members, layer, tau, side)?;
    Ok((loss, pullback(adj, &grads)?))
}

fn unit_rows(mut m: Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut norms = Vec::with_capacity(m.nrows());
    for mut row in m.axis_iter_mut(Axis(0)) {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
        norms.push(n);
    }
    (m, norms)
}

/// Back through `x̂ = x / ‖x‖`: `∂x = (∂x̂ - (∂x̂·x̂) x̂) / ‖x‖`.
fn add_unnormalized(
    out: &mut ndarray::ArrayViewMut1<'_, f64>,
    hat: &Array2<f64>,
    d_hat: &Array2<f64>,
    norms: &[f64],
    s: usize,
) {
    let n = norms[s];
    if n == 0.0 {
        return;
    }
    let h = hat.row(s);
    let g = d_hat.row(s);
    let radial = g.dot(&h);
    for j in 0..out.len() {
        out[j] += (g[j] - radial * h[j]) / n;
    }
}
