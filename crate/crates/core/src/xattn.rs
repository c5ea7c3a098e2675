//! X-Layers: transformer blocks whose attention term is the sum of
//! self-attention on an evolving stream and cross-attention from
//! instance-stream queries to concatenated key tokens of other images,
//! with one projection-weight set shared by both terms.
//!
//! A stack of these layers turns an anchor's cached instance stream plus
//! per-layer key bundles into a fused feature f_x. The IntraX teacher and
//! the InterX module differ only in which weights they run and how their
//! bundles are built, so both go through [`run_x_stack`].

use crate::autodiff::{Tape, Value};
use crate::backbone::{extract_feature, ffn, mha, InstanceForward, LN_EPS};
use crate::error::{CoreError, Result};
use crate::params::{LayerParams, XParams};
use crate::real::Real;

/// Key rows for one X-layer step: layer-i token sequences of the key
/// images, concatenated along the token axis. No position information is
/// re-added; the rows carry whatever their instance streams embedded.
#[derive(Debug, Clone, Copy)]
pub struct KeyBundle {
    pub key_tokens: Value,
}

/// The evolving stream I_X after a given number of X-layers.
#[derive(Debug, Clone, Copy)]
pub struct XStream {
    pub i_x: Value,
    pub layer_index: usize,
}

/// Every intermediate stream of one stack plus the fused feature, shaped
/// `[1, D]` like the instance feature it is compared against.
#[derive(Debug, Clone)]
pub struct XStackForward {
    pub streams: Vec<XStream>,
    pub f_x: Value,
}

/// The X-attention term: `MHA(i_x, i_x, i_x) + MHA(q_x, keys, keys)`, both
/// calls running the same projection weights. Inputs are expected to be
/// already normalized by the caller ([`attention_x`] applies the block's
/// first LayerNorm to all three).
pub fn attention_x_sum<T: Real>(
    tape: &mut Tape<T>,
    i_x: Value,
    q_x: Value,
    keys: Value,
    lw: &LayerParams<Value>,
    num_heads: usize,
) -> Result<Value> {
    if tape.shape(i_x) != tape.shape(q_x) {
        return Err(CoreError::ShapeMismatch {
            op: "attention_x",
            lhs: tape.shape(i_x).to_vec(),
            rhs: tape.shape(q_x).to_vec(),
        });
    }
    let self_att = mha(tape, i_x, i_x, i_x, lw, num_heads)?;
    let cross_att = mha(tape, q_x, keys, keys, lw, num_heads)?;
    tape.add(self_att, cross_att)
}

/// One full X-layer. Mirrors the instance layer's pre-norm wiring with the
/// attention sub-block swapped for the two-term sum:
/// `z' = i_x + AttnX(LN1(i_x), LN1(q_x), LN1(keys)); out = z' + FFN(LN2(z'))`.
pub fn attention_x<T: Real>(
    tape: &mut Tape<T>,
    i_x: Value,
    q_x: Value,
    k_x: &KeyBundle,
    lw: &LayerParams<Value>,
    num_heads: usize,
) -> Result<Value> {
    let n_i = tape.layer_norm(i_x, lw.ln1.gamma, lw.ln1.beta, LN_EPS)?;
    let n_q = tape.layer_norm(q_x, lw.ln1.gamma, lw.ln1.beta, LN_EPS)?;
    let n_k = tape.layer_norm(k_x.key_tokens, lw.ln1.gamma, lw.ln1.beta, LN_EPS)?;
    let att = attention_x_sum(tape, n_i, n_q, n_k, lw, num_heads)?;
    let z1 = tape.add(i_x, att)?;
    let n2 = tape.layer_norm(z1, lw.ln2.gamma, lw.ln2.beta, LN_EPS)?;
    let f = ffn(tape, n2, lw)?;
    tape.add(z1, f)
}

/// Runs a full X-stack over an anchor's cached instance stream.
///
/// The stream starts as the anchor's layer-0 tokens; X-layer i (1-based)
/// consumes the previous stream, the anchor's layer-(i-1) tokens as
/// queries, and `keys_per_layer[i-1]`. The fused feature is the final
/// LayerNorm's CLS row, so a depth-0 stack degenerates to
/// `layer_norm(Z_0)[CLS]`.
pub fn run_x_stack<T: Real>(
    tape: &mut Tape<T>,
    anchor: &InstanceForward,
    keys_per_layer: &[KeyBundle],
    x: &XParams<Value>,
    num_heads: usize,
    depth: usize,
) -> Result<XStackForward> {
    if keys_per_layer.len() != depth {
        return Err(CoreError::Config(format!(
            "x-stack depth {depth} but {} key bundles supplied",
            keys_per_layer.len()
        )));
    }
    if x.layers.len() != depth {
        return Err(CoreError::Config(format!(
            "x-stack depth {depth} but params carry {} layers",
            x.layers.len()
        )));
    }
    if anchor.per_layer.len() < depth.max(1) {
        return Err(CoreError::Config(format!(
            "x-stack depth {depth} needs that many cached instance sequences, anchor has {}",
            anchor.per_layer.len()
        )));
    }
    let mut i_x = anchor.per_layer[0].tokens;
    let mut streams = Vec::with_capacity(depth + 1);
    streams.push(XStream { i_x, layer_index: 0 });
    for j in 0..depth {
        let q_x = anchor.per_layer[j].tokens;
        i_x = attention_x(tape, i_x, q_x, &keys_per_layer[j], &x.layers[j], num_heads)?;
        streams.push(XStream { i_x, layer_index: j + 1 });
    }
    let f_x = extract_feature(tape, i_x, &x.final_ln)?;
    Ok(XStackForward { streams, f_x })
}

fn layer_tokens(fwd: &InstanceForward, batch_index: usize, layer_i: usize) -> Result<Value> {
    fwd.per_layer
        .get(layer_i)
        .map(|t| t.tokens)
        .ok_or_else(|| {
            CoreError::Batch(format!(
                "image {batch_index} caches {} token sequences, layer {layer_i} requested",
                fwd.per_layer.len()
            ))
        })
}

fn check_batch(forwards: &[InstanceForward], labels: &[usize], index: usize) -> Result<()> {
    if forwards.len() != labels.len() {
        return Err(CoreError::Batch(format!(
            "{} forwards but {} labels",
            forwards.len(),
            labels.len()
        )));
    }
    if index >= forwards.len() {
        return Err(CoreError::Batch(format!(
            "index {index} out of range for batch of {}",
            forwards.len()
        )));
    }
    Ok(())
}

/// Keys for one anchor's IntraX stack at a given layer: the layer-i token
/// sequences of every same-identity batch entry except the anchor itself,
/// concatenated in batch order. With P identities times K instances per
/// batch this is (K-1)(N+1) rows.
pub fn build_intrax_keys<T: Real>(
    tape: &mut Tape<T>,
    batch_forwards: &[InstanceForward],
    labels: &[usize],
    anchor_index: usize,
    layer_i: usize,
) -> Result<KeyBundle> {
    check_batch(batch_forwards, labels, anchor_index)?;
    let mut parts = Vec::new();
    for (b, fwd) in batch_forwards.iter().enumerate() {
        if b == anchor_index || labels[b] != labels[anchor_index] {
            continue;
        }
        parts.push(layer_tokens(fwd, b, layer_i)?);
    }
    if parts.is_empty() {
        return Err(CoreError::Batch(format!(
            "anchor {anchor_index} (identity {}) has no positives in the batch",
            labels[anchor_index]
        )));
    }
    let key_tokens = tape.concat(0, &parts)?;
    Ok(KeyBundle { key_tokens })
}

/// Keys for one anchor's InterX stack: the mined hard positive's layer-i
/// tokens followed by the hard negative's, 2(N+1) rows.
pub fn build_interx_keys<T: Real>(
    tape: &mut Tape<T>,
    batch_forwards: &[InstanceForward],
    labels: &[usize],
    anchor_index: usize,
    pos_index: usize,
    neg_index: usize,
    layer_i: usize,
) -> Result<KeyBundle> {
    check_batch(batch_forwards, labels, anchor_index)?;
    check_batch(batch_forwards, labels, pos_index)?;
    check_batch(batch_forwards, labels, neg_index)?;
    if labels[pos_index] != labels[anchor_index] {
        return Err(CoreError::Batch(format!(
            "hard positive {pos_index} has identity {} but anchor {anchor_index} has {}",
            labels[pos_index], labels[anchor_index]
        )));
    }
    if labels[neg_index] == labels[anchor_index] {
        return Err(CoreError::Batch(format!(
            "hard negative {neg_index} shares the anchor's identity {}",
            labels[anchor_index]
        )));
    }
    let pos = layer_tokens(&batch_forwards[pos_index], pos_index, layer_i)?;
    let neg = layer_tokens(&batch_forwards[neg_index], neg_index, layer_i)?;
    let key_tokens = tape.concat(0, &[pos, neg])?;
    Ok(KeyBundle { key_tokens })
}
