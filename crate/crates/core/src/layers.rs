//! Sublayer forward builders.
//!
//! Each function records one sublayer's forward pass on a tape, taking node
//! ids of the weights involved and returning the output node. Gradients come
//! from replaying the tape, so there are no hand-written backward rules in
//! this file; the analytic layer-norm Jacobian only appears in tests as an
//! oracle.
//!
//! The attention family:
//! * `multi_head_attention` is the usual scaled-dot product attention,
//!   ATT(x, y) = softmax(Q K^T / sqrt(d/h)) V . W_o with Q from x, K/V
//!   from y, plus optional additive masking before the softmax.
//! * `saan` is the cumulative-average branch [M_a (S W_v)] W_o, where row t
//!   of M_a averages positions 1..t. It has no softmax and O(1) incremental
//!   state.
//! * `aan_original` is the heavier ancestor of `saan`: masked average, then
//!   an inner feed-forward transform, then input/forget gates computed from
//!   the concatenation [state; transformed average].
//! * `merged_attention` runs a self branch (saan, masked self-attention, or
//!   the original average network) and cross attention over the encoder
//!   output in parallel and sends their sum through one shared W_o.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Additive mask value for blocked attention positions. Large enough that
/// exp(x - max) underflows to exactly 0 for any realistic score scale.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    PostNorm,
    PreNorm,
}

/// Node ids of one sublayer's boundary activations under post-norm:
/// z (block input), r = z + f(z) (residual output), o = LN(r).
#[derive(Debug, Clone, Copy)]
pub struct Probe {
    pub z: NodeId,
    pub r: NodeId,
    pub o: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct LnNodes {
    pub g: NodeId,
    pub b: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnNodes {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct FfnNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct AanNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    /// Gate matrices are [2d, d]: top half acts on the state, bottom half on
    /// the transformed average.
    pub wi: NodeId,
    pub bi: NodeId,
    pub wf: NodeId,
    pub bf: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub enum MergedBranch {
    Saan { wv: NodeId },
    SelfAttn { wq: NodeId, wk: NodeId, wv: NodeId },
    Aan(AanNodes),
}

/// Merged decoder attention: self branch + cross attention, shared W_o.
#[derive(Debug, Clone, Copy)]
pub struct MergedNodes {
    pub branch: MergedBranch,
    pub cross_wq: NodeId,
    pub cross_wk: NodeId,
    pub cross_wv: NodeId,
    pub wo: NodeId,
}

/// LN(x) = (x - mean) / sqrt(pop_var + eps) * g + b over the last axis,
/// recorded as primitive ops so backward differentiates this definition.
pub fn layer_norm(tape: &mut Tape, x: NodeId, ln: &LnNodes, eps: f64) -> Result<NodeId> {
    let shape = tape.shape(x);
    let d = *shape
        .last()
        .ok_or_else(|| Error::Contract("layer norm needs at least one axis".into()))?;
    if d < 2 {
        return Err(Error::Contract(format!(
            "layer norm over a single element is degenerate (last axis {d})"
        )));
    }
    if eps < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "layer norm epsilon must be nonnegative, got {eps}"
        )));
    }
    let mu = tape.row_mean(x)?;
    let mu_b = tape.broadcast_last(mu, d);
    let centered = tape.sub(x, mu_b)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.row_mean(sq)?;
    let var_eps = tape.add_scalar(var, eps);
    let std = tape.sqrt(var_eps);
    let std_b = tape.broadcast_last(std, d);
    let norm = tape.div(centered, std_b)?;
    let scaled = tape.mul_broadcast(norm, ln.g)?;
    tape.add_broadcast(scaled, ln.b)
}

/// RC(z, z') = z + z'.
pub fn residual(tape: &mut Tape, z: NodeId, fz: NodeId) -> Result<NodeId> {
    tape.add(z, fz)
}

/// relu(x W1 + b1) W2 + b2.
pub fn ffn(tape: &mut Tape, x: NodeId, n: &FfnNodes) -> Result<NodeId> {
    let h = tape.matmul(x, n.w1)?;
    let h = tape.add_broadcast(h, n.b1)?;
    let h = tape.relu(h);
    let out = tape.matmul(h, n.w2)?;
    tape.add_broadcast(out, n.b2)
}

/// Multi-head context before the output projection: softmax(Q K^T / sqrt(d/h)) V
/// with heads split from the model axis and re-merged afterwards.
pub fn attention_core(
    tape: &mut Tape,
    q_in: NodeId,
    kv_in: NodeId,
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    heads: usize,
    mask: Option<NodeId>,
    attn_dropout: f64,
) -> Result<NodeId> {
    let qshape = tape.shape(q_in).to_vec();
    let rank = qshape.len();
    if rank < 2 {
        return Err(Error::Contract(format!(
            "attention input must be at least 2-D, got {:?}",
            qshape
        )));
    }
    let d = qshape[rank - 1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::InvalidParameter(format!(
            "model dim {d} must split evenly over {heads} heads"
        )));
    }
    let dk = d / heads;
    let lead = &qshape[..rank - 2];
    let m = qshape[rank - 2];
    let kvshape = tape.shape(kv_in).to_vec();
    let n = kvshape[kvshape.len() - 2];

    let split = |tape: &mut Tape, x: NodeId, len: usize| -> Result<NodeId> {
        // [l.., len, d] -> [l.., len, h, dk] -> [l.., h, len, dk]
        let mut shape = lead.to_vec();
        shape.extend([len, heads, dk]);
        let r = tape.reshape(x, shape)?;
        let ln = lead.len();
        let mut perm: Vec<usize> = (0..ln).collect();
        perm.extend([ln + 1, ln, ln + 2]);
        tape.permute(r, &perm)
    };

    let q = tape.matmul(q_in, wq)?;
    let k = tape.matmul(kv_in, wk)?;
    let v = tape.matmul(kv_in, wv)?;
    let qh = split(tape, q, m)?;
    let kh = split(tape, k, n)?;
    let vh = split(tape, v, n)?;

    let scores = tape.matmul_nt(qh, kh)?;
    let scaled = tape.scale(scores, 1.0 / (dk as f64).sqrt());
    let masked = match mask {
        Some(mk) => tape.add(scaled, mk)?,
        None => scaled,
    };
    let weights = tape.softmax(masked)?;
    let weights = tape.dropout(weights, attn_dropout)?;
    let ctx = tape.matmul(weights, vh)?;

    // merge heads back: [l.., h, m, dk] -> [l.., m, h, dk] -> [l.., m, d]
    let ln = lead.len();
    let mut perm: Vec<usize> = (0..ln).collect();
    perm.extend([ln + 1, ln, ln + 2]);
    let merged = tape.permute(ctx, &perm)?;
    let mut out_shape = lead.to_vec();
    out_shape.extend([m, d]);
    tape.reshape(merged, out_shape)
}

/// Full attention sublayer output ATT(q_in, kv_in) W_o.
pub fn multi_head_attention(
    tape: &mut Tape,
    q_in: NodeId,
    kv_in: NodeId,
    n: &AttnNodes,
    heads: usize,
    mask: Option<NodeId>,
    attn_dropout: f64,
) -> Result<NodeId> {
    let core = attention_core(
        tape,
        q_in,
        kv_in,
        n.wq,
        n.wk,
        n.wv,
        heads,
        mask,
        attn_dropout,
    )?;
    tape.matmul(core, n.wo)
}

/// Row t of the average mask puts weight 1/t on positions 1..t and 0 above
/// the diagonal, so M_a V is the running mean of value rows.
pub fn average_mask(m: usize) -> Result<Tensor> {
    if m == 0 {
        return Err(Error::InvalidParameter(
            "average mask needs at least one position".into(),
        ));
    }
    let mut data = vec![0.0; m * m];
    for t in 0..m {
        let w = 1.0 / (t + 1) as f64;
        for j in 0..=t {
            data[t * m + j] = w;
        }
    }
    Tensor::new(vec![m, m], data)
}

/// Additive causal mask: 0 at or below the diagonal, MASK_VALUE above.
pub fn causal_mask(m: usize) -> Tensor {
    let mut data = vec![0.0; m * m];
    for t in 0..m {
        for j in t + 1..m {
            data[t * m + j] = MASK_VALUE;
        }
    }
    Tensor {
        shape: vec![m, m],
        data,
    }
}

/// Cumulative-average branch before the shared projection: M_a (S W_v).
pub fn saan_core(tape: &mut Tape, s: NodeId, wv: NodeId, avg_mask: NodeId) -> Result<NodeId> {
    let v = tape.matmul(s, wv)?;
    tape.matmul(avg_mask, v)
}

/// SAAN(S) = [M_a (S W_v)] W_o.
pub fn saan(
    tape: &mut Tape,
    s: NodeId,
    wv: NodeId,
    wo: NodeId,
    avg_mask: NodeId,
) -> Result<NodeId> {
    let core = saan_core(tape, s, wv, avg_mask)?;
    tape.matmul(core, wo)
}

/// Original average network: masked average -> inner FFN -> input/forget
/// gating over [state; transformed average]. Returns the gated output
/// (no output projection of its own).
pub fn aan_original(tape: &mut Tape, s: NodeId, n: &AanNodes, avg_mask: NodeId) -> Result<NodeId> {
    let d = *tape.shape(s).last().unwrap();
    let avg = tape.matmul(avg_mask, s)?;
    let h = tape.matmul(avg, n.w1)?;
    let h = tape.add_broadcast(h, n.b1)?;
    let h = tape.relu(h);
    let h = tape.matmul(h, n.w2)?;
    let h = tape.add_broadcast(h, n.b2)?;

    let gate = |tape: &mut Tape, w: NodeId, b: NodeId| -> Result<NodeId> {
        let w_s = tape.slice_rows(w, 0, d)?;
        let w_h = tape.slice_rows(w, d, d)?;
        let from_s = tape.matmul(s, w_s)?;
        let from_h = tape.matmul(h, w_h)?;
        let pre = tape.add(from_s, from_h)?;
        let pre = tape.add_broadcast(pre, b)?;
        Ok(tape.sigmoid(pre))
    };
    let gi = gate(tape, n.wi, n.bi)?;
    let gf = gate(tape, n.wf, n.bf)?;
    let keep = tape.mul(gi, s)?;
    let update = tape.mul(gf, h)?;
    tape.add(keep, update)
}

/// Merged decoder attention: (self branch + cross context) W_o.
#[allow(clippy::too_many_arguments)]
pub fn merged_attention(
    tape: &mut Tape,
    s: NodeId,
    enc_out: NodeId,
    n: &MergedNodes,
    heads: usize,
    self_mask: Option<NodeId>,
    cross_mask: Option<NodeId>,
    avg_mask: NodeId,
    attn_dropout: f64,
) -> Result<NodeId> {
    let branch = match n.branch {
        MergedBranch::Saan { wv } => saan_core(tape, s, wv, avg_mask)?,
        MergedBranch::SelfAttn { wq, wk, wv } => {
            attention_core(tape, s, s, wq, wk, wv, heads, self_mask, attn_dropout)?
        }
        MergedBranch::Aan(ref an) => aan_original(tape, s, an, avg_mask)?,
    };
    let cross = attention_core(
        tape,
        s,
        enc_out,
        n.cross_wq,
        n.cross_wk,
        n.cross_wv,
        heads,
        cross_mask,
        attn_dropout,
    )?;
    let sum = tape.add(branch, cross)?;
    tape.matmul(sum, n.wo)
}

/// Wraps a sublayer body in the residual/norm skeleton of the chosen layout.
/// Post-norm returns probe points (z, r, o); pre-norm has no post-sublayer
/// normalization, so no probes are defined for it.
pub fn sublayer<F>(
    tape: &mut Tape,
    layout: Layout,
    z: NodeId,
    ln: &LnNodes,
    eps: f64,
    residual_dropout: f64,
    body: F,
) -> Result<(NodeId, Option<Probe>)>
where
    F: FnOnce(&mut Tape, NodeId) -> Result<NodeId>,
{
    match layout {
        Layout::PostNorm => {
            let fz = body(tape, z)?;
            let fz = tape.dropout(fz, residual_dropout)?;
            let r = residual(tape, z, fz)?;
            let o = layer_norm(tape, r, ln, eps)?;
            Ok((o, Some(Probe { z, r, o })))
        }
        Layout::PreNorm => {
            let zn = layer_norm(tape, z, ln, eps)?;
            let fz = body(tape, zn)?;
            let fz = tape.dropout(fz, residual_dropout)?;
            let o = residual(tape, z, fz)?;
            Ok((o, None))
        }
    }
}

/// Sinusoidal position table: PE[pos, 2i] = sin(pos / 10000^(2i/d)),
/// PE[pos, 2i+1] = cos(same argument).
pub fn positional_encoding(max_len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = angle.sin();
            data[pos * d + 2 * i + 1] = angle.cos();
        }
        if d % 2 == 1 {
            let i = d / 2;
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + d - 1] = angle.sin();
        }
    }
    Tensor {
        shape: vec![max_len, d],
        data,
    }
}
