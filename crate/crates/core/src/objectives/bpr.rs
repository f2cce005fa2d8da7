use crate::backbone::{dot, pullback, ForwardTrace, LayerGrads};
use crate::error::{Error, Result};
use crate::graph::NormalizedAdjacency;

use super::{Batch, GradBuffer};

/// `ln(1 + e^x)` without overflow or cancellation.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Summed BPR loss `Σ -ln σ(ŷ_ui - ŷ_uj)` and its gradient w.r.t. the readout.
pub fn bpr_loss_layers(trace: &ForwardTrace, batch: &Batch) -> Result<(f64, LayerGrads)> {
    if batch.is_empty() {
        return Err(Error::Config("BPR loss needs a non-empty batch".into()));
    }
    let (nu, ni) = (trace.num_users(), trace.num_items());
    let z = trace.readout();
    let mut grads = LayerGrads::for_trace(trace);
    let mut loss = 0.0;
    for &(u, i, j) in batch.triples() {
        if u >= nu {
            return Err(Error::Bounds {
                index: u,
                limit: nu,
            });
        }
        if i >= ni || j >= ni {
            return Err(Error::Bounds {
                index: i.max(j),
                limit: ni,
            });
        }
        let zu = z.row(u);
        let zi = z.row(nu + i);
        let zj = z.row(nu + j);
        let zu_s = zu.as_slice().expect("standard layout");
        let x = dot(zu_s, zi.as_slice().expect("standard layout"))
            - dot(zu_s, zj.as_slice().expect("standard layout"));
        loss += softplus(-x);
        // d/dx softplus(-x) = -σ(-x)
        let coef = -sigmoid(-x);
        {
            let mut gu = grads.readout_row_mut(u);
            for k in 0..gu.len() {
                gu[k] += coef * (zi[k] - zj[k]);
            }
        }
        grads.readout_row_mut(nu + i).scaled_add(coef, &zu);
        grads.readout_row_mut(nu + j).scaled_add(-coef, &zu);
    }
    Ok((loss, grads))
}

/// [`bpr_loss_layers`] pulled back to the base embeddings.
pub fn bpr_loss(
    trace: &ForwardTrace,
    adj: &NormalizedAdjacency,
    batch: &Batch,
) -> Result<(f64, GradBuffer)> {
    let (loss, grads) = bpr_loss_layers(trace, batch)?;
    Ok((loss, pullback(adj, &grads)?))
}
