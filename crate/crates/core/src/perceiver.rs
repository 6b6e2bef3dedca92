//! ForgePerceiver: a lightweight ViT over visual plus learnable query tokens.
//!
//! Queries interact with the patch stream and produce two kinds of forgery
//! priors: head-specific masks that bias the backbone's class-token
//! attention, and a localization map trained against ground-truth masks.

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_block_params, transformer_block, BlockNodes};
use crate::params::{BoundParams, ParamStore};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Hidden width multiplier of the perceiver MLPs.
const MLP_RATIO: usize = 2;
/// Mid channel count of the standard convolutional aggregation head.
pub const CONV_HEAD_MID: usize = 16;
/// Init scale of the g1/g2/g3 mask projections.
const MASK_PROJ_INIT_STD: f64 = 0.01;
/// Cosine denominator guard of the orthogonality loss.
pub const ORTH_EPS: f64 = 1e-8;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PerceiverConfig {
    /// Number of learnable query tokens q.
    pub num_queries: usize,
    /// Internal width d_v.
    pub width: usize,
    /// Transformer depth.
    pub depth: usize,
    /// Internal attention heads.
    pub heads_internal: usize,
    /// Attention heads of the backbone the masks will bias; the head axis of
    /// every mask set has this length.
    pub backbone_heads: usize,
}

impl Default for PerceiverConfig {
    fn default() -> Self {
        PerceiverConfig { num_queries: 8, width: 48, depth: 2, heads_internal: 3, backbone_heads: 4 }
    }
}

impl PerceiverConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_queries == 0 {
            problems.push("num_queries must be >= 1".to_string());
        }
        if self.width == 0 || self.heads_internal == 0 || self.width % self.heads_internal != 0 {
            problems.push(format!(
                "width {} must be divisible by heads_internal {}",
                self.width, self.heads_internal
            ));
        }
        if self.depth == 0 {
            problems.push("depth must be >= 1".to_string());
        }
        if self.backbone_heads == 0 {
            problems.push("backbone_heads must be >= 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Shape of the convolutional aggregation head h(·) over the q query maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvHeadSpec {
    /// 1x1 conv to `CONV_HEAD_MID` channels, GELU, 3x3 conv to one channel.
    Standard,
    /// Single 1x1 conv straight to one channel. Degenerate aggregator used
    /// by oracles that need h(·) to reduce to an identity-like map.
    Linear1x1,
}

/// All mask artifacts derived from one frame.
#[derive(Clone, Debug)]
pub struct ForgeryMaskSet {
    /// Head-specific masks M, [H, q, h_v, w_v].
    pub head_masks: Tensor,
    /// Query-wise masks (head means), [q, h_v, w_v].
    pub query_masks: Tensor,
    /// Query-wise localization maps, [q, h_v, w_v].
    pub loc_query_maps: Tensor,
    /// Aggregated localization map in (0,1), [h_v, w_v].
    pub loc_map: Tensor,
}

pub struct ForgePerceiver {
    pub config: PerceiverConfig,
    pub conv_head: ConvHeadSpec,
    /// Incoming patch-embedding dimension (the backbone's d_p).
    pub input_dim: usize,
    /// Patch-grid side length, equal to the backbone's.
    pub grid: usize,
}

impl ForgePerceiver {
    pub fn new(config: PerceiverConfig, input_dim: usize, grid: usize) -> Result<Self> {
        config.validate()?;
        Ok(ForgePerceiver { config, conv_head: ConvHeadSpec::Standard, input_dim, grid })
    }

    pub fn num_patches(&self) -> usize {
        self.grid * self.grid
    }

    /// Insert every trainable tensor this module owns.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha20Rng) {
        let d = self.config.width;
        let q = self.config.num_queries;
        let h = self.config.backbone_heads;
        let lin = |rng: &mut ChaCha20Rng, fan_in: usize, shape: &[usize]| {
            Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), rng)
        };

        store.insert("perceiver.queries", Tensor::randn(&[q, d], 1.0, rng));
        store.insert("perceiver.input_proj.w", lin(rng, self.input_dim, &[self.input_dim, d]));
        store.insert("perceiver.input_proj.b", Tensor::zeros(&[d]));
        for l in 0..self.config.depth {
            init_block_params(store, &format!("perceiver.block{l}"), d, d * MLP_RATIO, rng);
        }
        // Final token norm. The mask products downstream are unbounded in
        // the token scale; without this the attention-bias race inflates the
        // residual streams until every head saturates.
        store.insert("perceiver.norm.g", Tensor::filled(&[d], 1.0));
        store.insert("perceiver.norm.b", Tensor::zeros(&[d]));
        // Small-scale init: masks are attention-bias logits and sigmoid
        // pre-activations, so they must start near zero or both saturate
        // before any signal can form.
        store.insert("g1.w", Tensor::randn(&[d, d * h], MASK_PROJ_INIT_STD, rng));
        store.insert("g1.b", Tensor::zeros(&[d * h]));
        store.insert("g2.w", Tensor::randn(&[d, d], MASK_PROJ_INIT_STD, rng));
        store.insert("g2.b", Tensor::zeros(&[d]));
        store.insert("g3.w", Tensor::randn(&[d, d], MASK_PROJ_INIT_STD, rng));
        store.insert("g3.b", Tensor::zeros(&[d]));
        // Query-side projection of the localization path. The attention-bias
        // path rewards ever-growing mask magnitudes; giving localization its
        // own query map keeps its similarity products at a trainable scale.
        store.insert("g3.q.w", Tensor::randn(&[d, d], MASK_PROJ_INIT_STD, rng));
        store.insert("g3.q.b", Tensor::zeros(&[d]));
        match self.conv_head {
            ConvHeadSpec::Standard => {
                store.insert("conv_head.c1.w", lin(rng, q, &[CONV_HEAD_MID, q, 1, 1]));
                store.insert("conv_head.c1.b", Tensor::zeros(&[CONV_HEAD_MID]));
                store.insert(
                    "conv_head.c2.w",
                    lin(rng, CONV_HEAD_MID * 9, &[1, CONV_HEAD_MID, 3, 3]),
                );
                store.insert("conv_head.c2.b", Tensor::zeros(&[1]));
            }
            ConvHeadSpec::Linear1x1 => {
                store.insert("conv_head.c1.w", lin(rng, q, &[1, q, 1, 1]));
                store.insert("conv_head.c1.b", Tensor::zeros(&[1]));
            }
        }
    }

    // ── tape forward ─────────────────────────────────────────────────────

    /// Run the perceiver ViT. `v_in` is [n_p, d_p] (the backbone's
    /// patch-embedding-layer output). Returns (V_out [n_p, d_v], Q_out [q, d_v]).
    pub fn run_on_tape(&self, tape: &mut Tape, bp: &BoundParams, v_in: NodeId) -> (NodeId, NodeId) {
        let n_p = self.num_patches();
        assert_eq!(
            tape.value(v_in).dims2(),
            (n_p, self.input_dim),
            "perceiver input grid mismatch"
        );
        let w = bp.id("perceiver.input_proj.w");
        let b = bp.id("perceiver.input_proj.b");
        let v = tape.linear(v_in, w, b);
        let queries = bp.id("perceiver.queries");
        let mut x = tape.concat_rows(&[v, queries]);
        for l in 0..self.config.depth {
            let blk = BlockNodes::bind(bp, &format!("perceiver.block{l}"));
            x = transformer_block(tape, x, &blk, self.config.heads_internal, None);
        }
        let ng = bp.id("perceiver.norm.g");
        let nb = bp.id("perceiver.norm.b");
        let x = tape.layer_norm(x, ng, nb, crate::tensor::LN_EPS);
        let v_out = tape.slice_rows(x, 0, n_p);
        let q_out = tape.slice_rows(x, n_p, self.config.num_queries);
        (v_out, q_out)
    }

    /// Head-specific masks. Returns (M [H*q, n_p] head-major, M-hat [q, n_p]).
    pub fn head_masks_on_tape(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        v_out: NodeId,
        q_out: NodeId,
    ) -> (NodeId, NodeId) {
        let d = self.config.width;
        let h = self.config.backbone_heads;
        let v_hat = tape.linear(v_out, bp.id("g1.w"), bp.id("g1.b"));
        let q_hat = tape.linear(q_out, bp.id("g2.w"), bp.id("g2.b"));
        let mut per_head = Vec::with_capacity(h);
        for i in 0..h {
            let v_i = tape.slice_cols(v_hat, i * d, d);
            let v_t = tape.transpose(v_i);
            per_head.push(tape.matmul(q_hat, v_t));
        }
        let m = tape.concat_rows(&per_head);
        let mut acc = per_head[0];
        for &m_i in &per_head[1..] {
            acc = tape.add(acc, m_i);
        }
        let m_hat = tape.scale(acc, 1.0 / h as f64);
        (m, m_hat)
    }

    /// Localization path. Returns (M-tilde [q, n_p], M_loc [h_v, w_v]).
    pub fn localization_on_tape(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        v_out: NodeId,
        q_out: NodeId,
    ) -> (NodeId, NodeId) {
        let v_tilde = tape.linear(v_out, bp.id("g3.w"), bp.id("g3.b"));
        let q_hat = tape.linear(q_out, bp.id("g3.q.w"), bp.id("g3.q.b"));
        let v_t = tape.transpose(v_tilde);
        let m_tilde = tape.matmul(q_hat, v_t);

        let g = self.grid;
        let stacked = tape.reshape(m_tilde, vec![self.config.num_queries, g, g]);
        let c1w = bp.id("conv_head.c1.w");
        let c1b = bp.id("conv_head.c1.b");
        let logits = match self.conv_head {
            ConvHeadSpec::Standard => {
                let mid = tape.conv2d(stacked, c1w, c1b, 0);
                let mid = tape.gelu(mid);
                tape.conv2d(mid, bp.id("conv_head.c2.w"), bp.id("conv_head.c2.b"), 1)
            }
            ConvHeadSpec::Linear1x1 => tape.conv2d(stacked, c1w, c1b, 0),
        };
        let logits = tape.reshape(logits, vec![g, g]);
        let loc = tape.sigmoid(logits);
        (m_tilde, loc)
    }

    /// Orthogonality loss over query-wise masks [q, n_p]: the summed absolute
    /// cosine over ordered pairs u != v (computed as twice the u < v sum).
    pub fn orthogonality_on_tape(tape: &mut Tape, m_hat: NodeId) -> NodeId {
        let q = tape.value(m_hat).dims2().0;
        if q < 2 {
            return tape.constant(Tensor::scalar(0.0));
        }
        let rows: Vec<NodeId> = (0..q).map(|u| tape.slice_rows(m_hat, u, 1)).collect();
        let norms: Vec<NodeId> = rows
            .iter()
            .map(|&r| {
                let sq = tape.mul(r, r);
                let ss = tape.sum_all(sq);
                tape.sqrt(ss)
            })
            .collect();
        let mut total: Option<NodeId> = None;
        for u in 0..q {
            for v in (u + 1)..q {
                let dot = tape.row_dot(rows[u], rows[v]);
                let dot = tape.reshape(dot, vec![1]);
                let denom = tape.mul(norms[u], norms[v]);
                let denom = tape.add_const(denom, ORTH_EPS);
                let cos = tape.div_elem(dot, denom);
                let a = tape.abs(cos);
                total = Some(match total {
                    Some(t) => tape.add(t, a),
                    None => a,
                });
            }
        }
        tape.scale(total.unwrap(), 2.0)
    }

    /// MSE between the bilinearly upsampled localization map and the
    /// ground-truth mask at image resolution, on the tape.
    pub fn localization_loss_on_tape(tape: &mut Tape, m_loc: NodeId, g: NodeId) -> NodeId {
        let (h, w) = tape.value(g).dims2();
        let up = tape.bilinear_upsample(m_loc, h, w);
        let diff = tape.sub(up, g);
        let sq = tape.mul(diff, diff);
        tape.mean_all(sq)
    }

    // ── public evaluation wrappers ───────────────────────────────────────

    /// Run the perceiver over patch embeddings [h_v, w_v, d_p].
    /// Returns (V_out [h_v, w_v, d_v], Q_out [q, d_v]).
    pub fn run_perceiver(&self, store: &ParamStore, v: &Tensor) -> Result<(Tensor, Tensor)> {
        let g = self.grid;
        if v.shape() != [g, g, self.input_dim] {
            return Err(Error::Shape(format!(
                "expected patch embeddings [{g}, {g}, {}], got {:?}",
                self.input_dim,
                v.shape()
            )));
        }
        let mut tape = Tape::new();
        let bp = BoundParams::bind(store, &mut tape);
        let v_in = tape.constant(v.reshaped(vec![g * g, self.input_dim]));
        let (v_out, q_out) = self.run_on_tape(&mut tape, &bp, v_in);
        Ok((
            tape.value(v_out).reshaped(vec![g, g, self.config.width]),
            tape.value(q_out).clone(),
        ))
    }

    /// Head masks from perceiver outputs.
    /// Returns (M [H, q, h_v, w_v], M-hat [q, h_v, w_v]).
    pub fn compute_head_masks(
        &self,
        store: &ParamStore,
        v_out: &Tensor,
        q_out: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let (g, d, q, h) =
            (self.grid, self.config.width, self.config.num_queries, self.config.backbone_heads);
        if v_out.shape() != [g, g, d] || q_out.shape() != [q, d] {
            return Err(Error::Shape(format!(
                "expected V_out [{g}, {g}, {d}] and Q_out [{q}, {d}], got {:?} and {:?}",
                v_out.shape(),
                q_out.shape()
            )));
        }
        let mut tape = Tape::new();
        let bp = BoundParams::bind(store, &mut tape);
        let v_node = tape.constant(v_out.reshaped(vec![g * g, d]));
        let q_node = tape.constant(q_out.clone());
        let (m, m_hat) = self.head_masks_on_tape(&mut tape, &bp, v_node, q_node);
        Ok((
            tape.value(m).reshaped(vec![h, q, g, g]),
            tape.value(m_hat).reshaped(vec![q, g, g]),
        ))
    }

    /// Localization maps from perceiver outputs.
    /// Returns (M-tilde [q, h_v, w_v], M_loc [h_v, w_v]).
    pub fn localization_map(
        &self,
        store: &ParamStore,
        v_out: &Tensor,
        q_out: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let (g, d, q) = (self.grid, self.config.width, self.config.num_queries);
        if v_out.shape() != [g, g, d] || q_out.shape() != [q, d] {
            return Err(Error::Shape(format!(
                "expected V_out [{g}, {g}, {d}] and Q_out [{q}, {d}], got {:?} and {:?}",
                v_out.shape(),
                q_out.shape()
            )));
        }
        let mut tape = Tape::new();
        let bp = BoundParams::bind(store, &mut tape);
        let v_node = tape.constant(v_out.reshaped(vec![g * g, d]));
        let q_node = tape.constant(q_out.clone());
        let (m_tilde, loc) = self.localization_on_tape(&mut tape, &bp, v_node, q_node);
        Ok((tape.value(m_tilde).reshaped(vec![q, g, g]), tape.value(loc).clone()))
    }

    /// Full mask artifact set for one frame's patch embeddings.
    pub fn mask_set(&self, store: &ParamStore, patch_embeddings: &Tensor) -> Result<ForgeryMaskSet> {
        let (v_out, q_out) = self.run_perceiver(store, patch_embeddings)?;
        let (head_masks, query_masks) = self.compute_head_masks(store, &v_out, &q_out)?;
        let (loc_query_maps, loc_map) = self.localization_map(store, &v_out, &q_out)?;
        Ok(ForgeryMaskSet { head_masks, query_masks, loc_query_maps, loc_map })
    }
}

/// Diversity loss over query-wise masks [q, h_v, w_v]: summed absolute
/// pairwise cosine similarity of the flattened masks, over ordered pairs.
pub fn orthogonality_loss(query_masks: &Tensor) -> Result<f64> {
    let shape = query_masks.shape();
    if shape.is_empty() || shape[0] == 0 {
        return Err(Error::Validation("orthogonality loss needs at least one mask".into()));
    }
    let q = shape[0];
    let n: usize = shape[1..].iter().product();
    let mut tape = Tape::new();
    let m = tape.constant(query_masks.reshaped(vec![q, n]));
    let loss = ForgePerceiver::orthogonality_on_tape(&mut tape, m);
    Ok(tape.scalar_value(loss))
}

/// MSE between the bilinearly upsampled localization map and a ground-truth
/// mask in [0,1] at image resolution.
pub fn localization_loss(m_loc: &Tensor, g: &Tensor) -> Result<f64> {
    validate_mask_range(g)?;
    let mut tape = Tape::new();
    let m = tape.constant(m_loc.clone());
    let gn = tape.constant(g.clone());
    let loss = ForgePerceiver::localization_loss_on_tape(&mut tape, m, gn);
    Ok(tape.scalar_value(loss))
}

pub(crate) fn validate_mask_range(g: &Tensor) -> Result<()> {
    if g.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Validation("mask values must lie in [0, 1]".into()));
    }
    Ok(())
}
