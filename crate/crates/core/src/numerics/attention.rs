//! Multi-head scaled dot-product attention as a graph composite.

use std::sync::Arc;

use super::graph::{AttnMask, Graph, NodeId};
use super::NumericsError;

/// Projection parameters for one attention layer, already inserted into a
/// graph (weights [D×D], biases [D]).
///
/// The key projection carries no bias: a constant added to every key
/// shifts each softmax row uniformly and provably cannot change the
/// output, so the coordinate would only collect rounding noise.
#[derive(Clone, Copy, Debug)]
pub struct AttnProj {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

/// Scaled dot-product attention with `heads` heads over projected inputs.
///
/// `q` is [Tq×D], `k`/`v` are [Tk×D]; D must divide evenly into heads. Each
/// head's scores are scaled by 1/√(D/heads) and softmaxed over the visible
/// keys of `mask` (everything visible when `None`). Output is [Tq×D].
pub fn multi_head_attention(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
    mask: Option<Arc<AttnMask>>,
    proj: &AttnProj,
) -> Result<NodeId, NumericsError> {
    let d = *g
        .shape(q)
        .get(1)
        .ok_or_else(|| NumericsError::ShapeMismatch {
            op: "multi_head_attention",
            detail: format!("query shape {:?}", g.shape(q)),
        })?;
    if heads == 0 || d % heads != 0 {
        return Err(NumericsError::ShapeMismatch {
            op: "multi_head_attention",
            detail: format!("{heads} heads over dim {d}"),
        });
    }
    let tq = g.shape(q)[0];
    let tk = g.shape(k)[0];
    if g.shape(k)[1] != d || g.shape(v) != [tk, d] {
        return Err(NumericsError::ShapeMismatch {
            op: "multi_head_attention",
            detail: format!(
                "q {:?}, k {:?}, v {:?}",
                g.shape(q),
                g.shape(k),
                g.shape(v)
            ),
        });
    }
    let mask = match mask {
        Some(m) => {
            if m.rows != tq || m.cols != tk {
                return Err(NumericsError::ShapeMismatch {
                    op: "multi_head_attention",
                    detail: format!("mask [{}x{}] for Tq={tq}, Tk={tk}", m.rows, m.cols),
                });
            }
            m
        }
        None => Arc::new(AttnMask::all_visible(tq, tk)),
    };

    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let qp = {
        let t = g.matmul(q, proj.wq)?;
        g.add_row(t, proj.bq)?
    };
    let kp = g.matmul(k, proj.wk)?;
    let vp = {
        let t = g.matmul(v, proj.wv)?;
        g.add_row(t, proj.bv)?
    };

    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qs = g.slice_cols(qp, lo, hi)?;
        let ks = g.slice_cols(kp, lo, hi)?;
        let vs = g.slice_cols(vp, lo, hi)?;
        let scores = g.matmul_tb(qs, ks)?;
        let scaled = g.scale(scores, scale);
        let attn = g.masked_softmax(scaled, Arc::clone(&mask))?;
        head_outs.push(g.matmul(attn, vs)?);
    }
    let cat = g.concat_cols(&head_outs)?;
    let out = g.matmul(cat, proj.wo)?;
    g.add_row(out, proj.bo)
}
