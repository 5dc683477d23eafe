//! Attention and transformer layers assembled from tape primitives.
//!
//! Layers are pre-norm residual: `x + attn(norm(x))` then
//! `+ ffn(norm(..))`, so zeroed output projections reduce a layer to the
//! identity. The pair variant of cross-attention runs one softmax over
//! both images' keys by combining per-image partial sums; since f64
//! addition and max are commutative, swapping the images permutes
//! nothing and the output is bit-identical.

use crate::error::{TensorError, TensorResult};
use crate::tensor::{Tape, TensorId};

/// Projection weights for one attention operation, all `[d, d]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub w_q: TensorId,
    pub w_k: TensorId,
    pub w_v: TensorId,
    pub w_o: TensorId,
    pub heads: usize,
}

/// One full transformer layer: attention plus a GELU FFN (d -> 4d -> d),
/// each behind its own layer norm.
#[derive(Debug, Clone, Copy)]
pub struct BlockWeights {
    pub attn: AttentionWeights,
    pub ffn_w1: TensorId,
    pub ffn_b1: TensorId,
    pub ffn_w2: TensorId,
    pub ffn_b2: TensorId,
    pub ln1_gain: TensorId,
    pub ln1_bias: TensorId,
    pub ln2_gain: TensorId,
    pub ln2_bias: TensorId,
}

pub const LN_EPS: f64 = 1e-5;

fn head_dims(tape: &Tape, x: TensorId, w: &AttentionWeights) -> TensorResult<(usize, usize)> {
    let d = tape.shape(x)[1];
    if w.heads == 0 || d % w.heads != 0 {
        return Err(TensorError::Contract(format!(
            "attention: d_model {d} not divisible by {} heads",
            w.heads
        )));
    }
    Ok((d, d / w.heads))
}

fn split_heads(
    tape: &mut Tape,
    x: TensorId,
    heads: usize,
    dh: usize,
) -> TensorResult<Vec<TensorId>> {
    (0..heads).map(|h| tape.slice(x, 1, h * dh, dh)).collect()
}

/// Multi-head self-attention over `x: [t, d]`; `causal` masks strictly
/// future positions before the softmax.
pub fn mhsa(
    tape: &mut Tape,
    x: TensorId,
    w: &AttentionWeights,
    causal: bool,
) -> TensorResult<TensorId> {
    let (_, dh) = head_dims(tape, x, w)?;
    let t = tape.shape(x)[0];
    let q = tape.matmul(x, w.w_q)?;
    let k = tape.matmul(x, w.w_k)?;
    let v = tape.matmul(x, w.w_v)?;
    let qs = split_heads(tape, q, w.heads, dh)?;
    let ks = split_heads(tape, k, w.heads, dh)?;
    let vs = split_heads(tape, v, w.heads, dh)?;
    let mask = causal.then(|| causal_mask(tape, t));
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let kt = tape.transpose(ks[h], &[1, 0])?;
        let scores_raw = tape.matmul(qs[h], kt)?;
        let mut scores = tape.scale(scores_raw, scale);
        if let Some(m) = mask {
            scores = tape.add(scores, m)?;
        }
        let attn = tape.softmax(scores, 1)?;
        outs.push(tape.matmul(attn, vs[h])?);
    }
    let merged = tape.concat(&outs, 1)?;
    tape.matmul(merged, w.w_o)
}

/// Cross-attention: queries from `q_in: [k, d]`, keys and values from
/// `kv_in: [s, d]`. Output length follows the queries.
pub fn cross_attention(
    tape: &mut Tape,
    q_in: TensorId,
    kv_in: TensorId,
    w: &AttentionWeights,
) -> TensorResult<TensorId> {
    let (_, dh) = head_dims(tape, q_in, w)?;
    let q = tape.matmul(q_in, w.w_q)?;
    let k = tape.matmul(kv_in, w.w_k)?;
    let v = tape.matmul(kv_in, w.w_v)?;
    let qs = split_heads(tape, q, w.heads, dh)?;
    let ks = split_heads(tape, k, w.heads, dh)?;
    let vs = split_heads(tape, v, w.heads, dh)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let kt = tape.transpose(ks[h], &[1, 0])?;
        let scores_raw = tape.matmul(qs[h], kt)?;
        let scores = tape.scale(scores_raw, scale);
        let attn = tape.softmax(scores, 1)?;
        outs.push(tape.matmul(attn, vs[h])?);
    }
    let merged = tape.concat(&outs, 1)?;
    tape.matmul(merged, w.w_o)
}

/// Cross-attention against two key/value sources under one softmax.
///
/// The normalizer and the weighted-value sums are built as `a`-part plus
/// `b`-part, so exchanging the sources exchanges the summands of a
/// commutative f64 addition: the result is bit-identical under swap.
/// The stabilizing row max is detached (softmax is invariant to it).
pub fn pair_cross_attention(
    tape: &mut Tape,
    q_in: TensorId,
    kv_a: TensorId,
    kv_b: TensorId,
    w: &AttentionWeights,
) -> TensorResult<TensorId> {
    let (_, dh) = head_dims(tape, q_in, w)?;
    if tape.shape(kv_a) != tape.shape(kv_b) {
        return Err(TensorError::DimensionMismatch {
            op: "pair_cross_attention",
            lhs: tape.shape(kv_a).to_vec(),
            rhs: tape.shape(kv_b).to_vec(),
        });
    }
    let q = tape.matmul(q_in, w.w_q)?;
    let ka = tape.matmul(kv_a, w.w_k)?;
    let kb = tape.matmul(kv_b, w.w_k)?;
    let va = tape.matmul(kv_a, w.w_v)?;
    let vb = tape.matmul(kv_b, w.w_v)?;
    let qs = split_heads(tape, q, w.heads, dh)?;
    let kas = split_heads(tape, ka, w.heads, dh)?;
    let kbs = split_heads(tape, kb, w.heads, dh)?;
    let vas = split_heads(tape, va, w.heads, dh)?;
    let vbs = split_heads(tape, vb, w.heads, dh)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let kat = tape.transpose(kas[h], &[1, 0])?;
        let kbt = tape.transpose(kbs[h], &[1, 0])?;
        let sa_raw = tape.matmul(qs[h], kat)?;
        let sb_raw = tape.matmul(qs[h], kbt)?;
        let sa = tape.scale(sa_raw, scale);
        let sb = tape.scale(sb_raw, scale);
        // detached per-row max across both score blocks
        let (rows, cols) = (tape.shape(sa)[0], tape.shape(sa)[1]);
        let mut row_max = vec![f64::NEG_INFINITY; rows];
        for (i, m) in row_max.iter_mut().enumerate() {
            for j in 0..cols {
                *m = m.max(tape.value(sa)[i * cols + j]).max(tape.value(sb)[i * cols + j]);
            }
        }
        let tile: Vec<f64> = (0..rows * cols).map(|i| row_max[i / cols]).collect();
        let m_const = tape.constant(tile, vec![rows, cols])?;
        let za = tape.sub(sa, m_const)?;
        let zb = tape.sub(sb, m_const)?;
        let ea = tape.exp(za);
        let eb = tape.exp(zb);
        let da = tape.row_sum(ea)?;
        let db = tape.row_sum(eb)?;
        let denom = tape.add(da, db)?;
        let na = tape.matmul(ea, vas[h])?;
        let nb = tape.matmul(eb, vbs[h])?;
        let num = tape.add(na, nb)?;
        outs.push(tape.row_div(num, denom)?);
    }
    let merged = tape.concat(&outs, 1)?;
    tape.matmul(merged, w.w_o)
}

fn causal_mask(tape: &mut Tape, t: usize) -> TensorId {
    let mut mask = vec![0.0; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            mask[i * t + j] = f64::NEG_INFINITY;
        }
    }
    tape.constant(mask, vec![t, t]).unwrap()
}

fn ffn(tape: &mut Tape, x: TensorId, w: &BlockWeights) -> TensorResult<TensorId> {
    let h_lin = tape.matmul(x, w.ffn_w1)?;
    let h_bias = tape.add(h_lin, w.ffn_b1)?;
    let h_act = tape.gelu(h_bias);
    let out_lin = tape.matmul(h_act, w.ffn_w2)?;
    tape.add(out_lin, w.ffn_b2)
}

fn attn_ffn_layer(
    tape: &mut Tape,
    x: TensorId,
    w: &BlockWeights,
    attend: impl FnOnce(&mut Tape, TensorId) -> TensorResult<TensorId>,
) -> TensorResult<TensorId> {
    let normed = tape.layer_norm(x, w.ln1_gain, w.ln1_bias, LN_EPS)?;
    let attn_out = attend(tape, normed)?;
    let h = tape.add(x, attn_out)?;
    let normed2 = tape.layer_norm(h, w.ln2_gain, w.ln2_bias, LN_EPS)?;
    let ffn_out = ffn(tape, normed2, w)?;
    tape.add(h, ffn_out)
}

/// Pre-norm self-attention layer.
pub fn encoder_layer(tape: &mut Tape, x: TensorId, w: &BlockWeights) -> TensorResult<TensorId> {
    attn_ffn_layer(tape, x, w, |t, n| mhsa(t, n, &w.attn, false))
}

/// Pre-norm causal self-attention layer.
pub fn decoder_layer(tape: &mut Tape, x: TensorId, w: &BlockWeights) -> TensorResult<TensorId> {
    attn_ffn_layer(tape, x, w, |t, n| mhsa(t, n, &w.attn, true))
}

/// Pre-norm layer whose attention reads the two key/value sources.
pub fn pair_cross_layer(
    tape: &mut Tape,
    x: TensorId,
    kv_a: TensorId,
    kv_b: TensorId,
    w: &BlockWeights,
) -> TensorResult<TensorId> {
    attn_ffn_layer(tape, x, w, |t, n| {
        pair_cross_attention(t, n, kv_a, kv_b, &w.attn)
    })
}

#[cfg(test)]
mod tests;
