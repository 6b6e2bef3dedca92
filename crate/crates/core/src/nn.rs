//! Shared transformer building blocks on the tape.

use rand_chacha::ChaCha20Rng;

use crate::params::{BoundParams, ParamStore};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Tensor, LN_EPS};

/// Node ids of one pre-LN transformer block's weights.
pub struct BlockNodes {
    pub ln1g: NodeId,
    pub ln1b: NodeId,
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub ln2g: NodeId,
    pub ln2b: NodeId,
    pub fc1w: NodeId,
    pub fc1b: NodeId,
    pub fc2w: NodeId,
    pub fc2b: NodeId,
}

impl BlockNodes {
    /// Bind a block's trainable weights from the store.
    pub fn bind(bp: &BoundParams, prefix: &str) -> Self {
        let id = |suffix: &str| bp.id(&format!("{prefix}.{suffix}"));
        BlockNodes {
            ln1g: id("ln1.g"),
            ln1b: id("ln1.b"),
            wq: id("attn.wq"),
            bq: id("attn.bq"),
            wk: id("attn.wk"),
            bk: id("attn.bk"),
            wv: id("attn.wv"),
            bv: id("attn.bv"),
            wo: id("attn.wo"),
            bo: id("attn.bo"),
            ln2g: id("ln2.g"),
            ln2b: id("ln2.b"),
            fc1w: id("mlp.fc1.w"),
            fc1b: id("mlp.fc1.b"),
            fc2w: id("mlp.fc2.w"),
            fc2b: id("mlp.fc2.b"),
        }
    }

    /// Bind a frozen block's weights as tape constants.
    pub fn constants(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Self {
        let mut id = |suffix: &str| tape.constant(store.get(&format!("{prefix}.{suffix}")).clone());
        BlockNodes {
            ln1g: id("ln1.g"),
            ln1b: id("ln1.b"),
            wq: id("attn.wq"),
            bq: id("attn.bq"),
            wk: id("attn.wk"),
            bk: id("attn.bk"),
            wv: id("attn.wv"),
            bv: id("attn.bv"),
            wo: id("attn.wo"),
            bo: id("attn.bo"),
            ln2g: id("ln2.g"),
            ln2b: id("ln2.b"),
            fc1w: id("mlp.fc1.w"),
            fc1b: id("mlp.fc1.b"),
            fc2w: id("mlp.fc2.w"),
            fc2b: id("mlp.fc2.b"),
        }
    }
}

/// Insert freshly initialized block weights under `prefix`.
pub fn init_block_params(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    hidden: usize,
    rng: &mut ChaCha20Rng,
) {
    let lin = |rng: &mut ChaCha20Rng, fan_in: usize, shape: &[usize]| {
        Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), rng)
    };
    store.insert(format!("{prefix}.ln1.g"), Tensor::filled(&[d], 1.0));
    store.insert(format!("{prefix}.ln1.b"), Tensor::zeros(&[d]));
    store.insert(format!("{prefix}.attn.wq"), lin(rng, d, &[d, d]));
    store.insert(format!("{prefix}.attn.bq"), Tensor::zeros(&[d]));
    store.insert(format!("{prefix}.attn.wk"), lin(rng, d, &[d, d]));
    store.insert(format!("{prefix}.attn.bk"), Tensor::zeros(&[d]));
    store.insert(format!("{prefix}.attn.wv"), lin(rng, d, &[d, d]));
    store.insert(format!("{prefix}.attn.bv"), Tensor::zeros(&[d]));
    store.insert(format!("{prefix}.attn.wo"), lin(rng, d, &[d, d]));
    store.insert(format!("{prefix}.attn.bo"), Tensor::zeros(&[d]));
    store.insert(format!("{prefix}.ln2.g"), Tensor::filled(&[d], 1.0));
    store.insert(format!("{prefix}.ln2.b"), Tensor::zeros(&[d]));
    store.insert(format!("{prefix}.mlp.fc1.w"), lin(rng, d, &[d, hidden]));
    store.insert(format!("{prefix}.mlp.fc1.b"), Tensor::zeros(&[hidden]));
    store.insert(format!("{prefix}.mlp.fc2.w"), lin(rng, hidden, &[hidden, d]));
    store.insert(format!("{prefix}.mlp.fc2.b"), Tensor::zeros(&[d]));
}

/// Pre-LN transformer block over [T, d] tokens on the tape. `logit_mask`
/// (e.g. a causal mask) is added to every head's attention logits.
pub fn transformer_block(
    tape: &mut Tape,
    x: NodeId,
    w: &BlockNodes,
    heads: usize,
    logit_mask: Option<NodeId>,
) -> NodeId {
    let d = tape.value(x).dims2().1;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let xn = tape.layer_norm(x, w.ln1g, w.ln1b, LN_EPS);
    let q = tape.linear(xn, w.wq, w.bq);
    let k = tape.linear(xn, w.wk, w.bk);
    let v = tape.linear(xn, w.wv, w.bv);
    let mut head_outs = Vec::with_capacity(heads);
    for i in 0..heads {
        let q_i = tape.slice_cols(q, i * dh, dh);
        let k_i = tape.slice_cols(k, i * dh, dh);
        let v_i = tape.slice_cols(v, i * dh, dh);
        let k_t = tape.transpose(k_i);
        let logits = tape.matmul(q_i, k_t);
        let mut logits = tape.scale(logits, scale);
        if let Some(m) = logit_mask {
            logits = tape.add(logits, m);
        }
        let attn = tape.softmax_rows(logits);
        head_outs.push(tape.matmul(attn, v_i));
    }
    let cat = tape.concat_cols(&head_outs);
    let attn_out = tape.linear(cat, w.wo, w.bo);
    let x = tape.add(x, attn_out);

    let xn2 = tape.layer_norm(x, w.ln2g, w.ln2b, LN_EPS);
    let h = tape.linear(xn2, w.fc1w, w.fc1b);
    let h = tape.gelu(h);
    let mlp = tape.linear(h, w.fc2w, w.fc2b);
    tape.add(x, mlp)
}
