//! Identity-aware vision-language-alignment scoring.
//!
//! Builds the real/fake prompt pair, injects the frame's identity prior into
//! the text stream, aligns patch embeddings against the resulting text
//! features into a per-patch fake-probability map, and fuses that map with
//! the forgery localization map into the local authenticity score.

use rand_chacha::ChaCha20Rng;

use crate::backbone::{Backbone, ClassTag, TextPromptEmbedding};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamStore};
use crate::perceiver::validate_mask_range;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Prompt templates. The placeholder token is replaced by the identity prior.
pub const REAL_TEMPLATE: &str = "This is a real photo of <id> person.";
pub const FAKE_TEMPLATE: &str = "This is a fake photo of <id> person.";

/// Dice smoothing term; makes the all-empty case lossless instead of undefined.
pub const DICE_EPS: f64 = 1.0;
/// Output dimension of the fusion network psi.
pub const FUSION_DIM: usize = 32;
/// Mid channel count of psi.
const PSI_MID: usize = 16;

/// The tokenized real/fake prompt pair.
#[derive(Clone, Debug)]
pub struct PromptPair {
    pub real: TextPromptEmbedding,
    pub fake: TextPromptEmbedding,
}

impl PromptPair {
    pub fn build(backbone: &Backbone) -> Result<Self> {
        Ok(PromptPair {
            real: backbone.tokenize_prompt(REAL_TEMPLATE, ClassTag::Real)?,
            fake: backbone.tokenize_prompt(FAKE_TEMPLATE, ClassTag::Fake)?,
        })
    }
}

/// Patch-grid fake-probability map with the text features that produced it.
#[derive(Clone, Debug)]
pub struct VlaMap {
    /// [h_p, w_p], every entry strictly in (0,1).
    pub map: Tensor,
    pub text_real: Tensor,
    pub text_fake: Tensor,
}

/// Fused local-branch output.
#[derive(Clone, Debug)]
pub struct FusionOutput {
    /// [1, FUSION_DIM] pooled fusion feature F_x.
    pub fused_feature: Tensor,
    /// Fake-class probability s_VLA in (0,1).
    pub local_score: f64,
}

/// Identity-aware VLA scoring head: owns the adapter phi, the identity
/// projection W_id, the fusion network psi and the scoring head eta2.
pub struct VlaScoring {
    /// Backbone visual dimension d_p.
    pub visual_dim: usize,
    /// Text token dimension d_tk (substitution target space).
    pub token_dim: usize,
    /// Shared output dimension d_t.
    pub out_dim: usize,
    /// Patch-grid side length.
    pub grid: usize,
}

impl VlaScoring {
    pub fn new(visual_dim: usize, token_dim: usize, out_dim: usize, grid: usize) -> Self {
        VlaScoring { visual_dim, token_dim, out_dim, grid }
    }

    pub fn for_backbone(backbone: &Backbone) -> Self {
        VlaScoring::new(
            backbone.config.embed_dim,
            backbone.config.text_token_dim,
            backbone.config.text_out_dim,
            backbone.config.grid(),
        )
    }

    /// All parameter groups; the training pipeline calls the groups
    /// individually according to its variant ladder.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha20Rng) {
        self.init_fusion_params(store, rng);
        self.init_phi_params(store, rng);
        self.init_wid_params(store, rng);
    }

    /// Fusion network psi (two 3x3 convs plus global average pooling) and the
    /// local scoring head eta2 (two logits, fake class last).
    pub fn init_fusion_params(&self, store: &mut ParamStore, rng: &mut ChaCha20Rng) {
        let lin = |rng: &mut ChaCha20Rng, fan_in: usize, shape: &[usize]| {
            Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), rng)
        };
        store.insert("psi.c1.w", lin(rng, 9, &[PSI_MID, 1, 3, 3]));
        store.insert("psi.c1.b", Tensor::zeros(&[PSI_MID]));
        store.insert("psi.c2.w", lin(rng, PSI_MID * 9, &[FUSION_DIM, PSI_MID, 3, 3]));
        store.insert("psi.c2.b", Tensor::zeros(&[FUSION_DIM]));
        // Feature norm at the head input. The fused maps are low-amplitude,
        // so unnormalized pooled features leave the logits too small for the
        // optimizer to move within the training budget.
        store.insert("psi.norm.g", Tensor::filled(&[FUSION_DIM], 1.0));
        store.insert("psi.norm.b", Tensor::zeros(&[FUSION_DIM]));
        store.insert("eta2.w", lin(rng, FUSION_DIM, &[FUSION_DIM, 2]));
        store.insert("eta2.b", Tensor::zeros(&[2]));
    }

    /// Patch-to-text adapter phi: linear, GELU, linear. The output layer
    /// starts small so the two-way softmax of the alignment map opens near
    /// one half instead of saturating.
    pub fn init_phi_params(&self, store: &mut ParamStore, rng: &mut ChaCha20Rng) {
        let lin = |rng: &mut ChaCha20Rng, fan_in: usize, shape: &[usize]| {
            Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), rng)
        };
        store.insert("phi.fc1.w", lin(rng, self.visual_dim, &[self.visual_dim, self.out_dim]));
        store.insert("phi.fc1.b", Tensor::zeros(&[self.out_dim]));
        store.insert("phi.fc2.w", Tensor::randn(&[self.out_dim, self.out_dim], 0.02, rng));
        store.insert("phi.fc2.b", Tensor::zeros(&[self.out_dim]));
    }

    /// Identity projection for the prior; identity-initialized when square.
    pub fn init_wid_params(&self, store: &mut ParamStore, rng: &mut ChaCha20Rng) {
        let w_id = if self.visual_dim == self.token_dim {
            Tensor::eye(self.visual_dim)
        } else {
            Tensor::randn(
                &[self.visual_dim, self.token_dim],
                1.0 / (self.visual_dim as f64).sqrt(),
                rng,
            )
        };
        store.insert("w_id.w", w_id);
    }

    // ── tape forward ─────────────────────────────────────────────────────

    /// ID-aware text features for one frame: the identity prior W_id(z_L) is
    /// substituted into both templates. Returns (F_r, F_f), each [1, d_t].
    pub fn id_prompts_on_tape(
        &self,
        backbone: &Backbone,
        tape: &mut Tape,
        bp: &BoundParams,
        prompts: &PromptPair,
        z_final: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let id_embedding = tape.matmul(z_final, bp.id("w_id.w"));
        let f_r = backbone.encode_text_on_tape(tape, &prompts.real, id_embedding)?;
        let f_f = backbone.encode_text_on_tape(tape, &prompts.fake, id_embedding)?;
        Ok((f_r, f_f))
    }

    /// Two-way softmax alignment map over patches. `patches` is [n_p, d_p];
    /// returns the fake-probability map [n_p, 1].
    pub fn vla_map_on_tape(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        patches: NodeId,
        f_real: NodeId,
        f_fake: NodeId,
    ) -> NodeId {
        let h = tape.linear(patches, bp.id("phi.fc1.w"), bp.id("phi.fc1.b"));
        let h = tape.gelu(h);
        let phi = tape.linear(h, bp.id("phi.fc2.w"), bp.id("phi.fc2.b"));
        let fr_t = tape.transpose(f_real);
        let ff_t = tape.transpose(f_fake);
        let logit_r = tape.matmul(phi, fr_t);
        let logit_f = tape.matmul(phi, ff_t);
        let logits = tape.concat_cols(&[logit_r, logit_f]);
        let probs = tape.softmax_rows(logits);
        tape.slice_cols(probs, 1, 1)
    }

    /// Dice loss between the upsampled map and the ground-truth mask.
    pub fn dice_on_tape(tape: &mut Tape, m_vla: NodeId, g: NodeId) -> NodeId {
        let (h, w) = tape.value(g).dims2();
        let p = tape.bilinear_upsample(m_vla, h, w);
        let inter = tape.mul(p, g);
        let inter = tape.sum_all(inter);
        let num = tape.scale(inter, 2.0);
        let num = tape.add_const(num, DICE_EPS);
        let sp = tape.sum_all(p);
        let sg = tape.sum_all(g);
        let denom = tape.add(sp, sg);
        let denom = tape.add_const(denom, DICE_EPS);
        let frac = tape.div_elem(num, denom);
        let neg = tape.scale(frac, -1.0);
        tape.add_const(neg, 1.0)
    }

    /// Elementwise fusion of the two maps, psi, and eta2.
    /// Returns (F_x [1, FUSION_DIM], logits [1, 2]).
    pub fn fuse_on_tape(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        m_loc: NodeId,
        m_vla: NodeId,
    ) -> (NodeId, NodeId) {
        let g = self.grid;
        let fused = tape.mul(m_loc, m_vla);
        let x = tape.reshape(fused, vec![1, g, g]);
        let x = tape.conv2d(x, bp.id("psi.c1.w"), bp.id("psi.c1.b"), 1);
        let x = tape.gelu(x);
        let x = tape.conv2d(x, bp.id("psi.c2.w"), bp.id("psi.c2.b"), 1);
        let x = tape.gelu(x);
        // Global average pooling over the spatial grid.
        let flat = tape.reshape(x, vec![FUSION_DIM, g * g]);
        let pool = tape.constant(Tensor::filled(&[g * g, 1], 1.0 / (g * g) as f64));
        let f_x = tape.matmul(flat, pool);
        let f_x = tape.reshape(f_x, vec![1, FUSION_DIM]);
        let logits = tape.linear(f_x, bp.id("eta2.w"), bp.id("eta2.b"));
        (f_x, logits)
    }

    // ── public evaluation wrappers ───────────────────────────────────────

    /// ID-aware text features (F_r, F_f) for a frame's final class token.
    pub fn build_id_prompts(
        &self,
        backbone: &Backbone,
        store: &ParamStore,
        prompts: &PromptPair,
        z_final: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        if z_final.numel() != self.visual_dim {
            return Err(Error::Shape(format!(
                "expected class token of {} values, got {:?}",
                self.visual_dim,
                z_final.shape()
            )));
        }
        let mut tape = Tape::new();
        let bp = BoundParams::bind(store, &mut tape);
        let z = tape.constant(z_final.reshaped(vec![1, self.visual_dim]));
        let (f_r, f_f) = self.id_prompts_on_tape(backbone, &mut tape, &bp, prompts, z)?;
        Ok((tape.value(f_r).clone(), tape.value(f_f).clone()))
    }

    /// VLA attention map over final patch tokens [h_p, w_p, d_p].
    pub fn vla_attention_map(
        &self,
        store: &ParamStore,
        patches: &Tensor,
        f_real: &Tensor,
        f_fake: &Tensor,
    ) -> Result<VlaMap> {
        let g = self.grid;
        if patches.shape() != [g, g, self.visual_dim] {
            return Err(Error::Shape(format!(
                "expected patches [{g}, {g}, {}], got {:?}",
                self.visual_dim,
                patches.shape()
            )));
        }
        if f_real.numel() != self.out_dim || f_fake.numel() != self.out_dim {
            return Err(Error::Shape("text feature dimension mismatch".into()));
        }
        let mut tape = Tape::new();
        let bp = BoundParams::bind(store, &mut tape);
        let p = tape.constant(patches.reshaped(vec![g * g, self.visual_dim]));
        let fr = tape.constant(f_real.reshaped(vec![1, self.out_dim]));
        let ff = tape.constant(f_fake.reshaped(vec![1, self.out_dim]));
        let m = self.vla_map_on_tape(&mut tape, &bp, p, fr, ff);
        Ok(VlaMap {
            map: tape.value(m).reshaped(vec![g, g]),
            text_real: f_real.reshaped(vec![1, self.out_dim]),
            text_fake: f_fake.reshaped(vec![1, self.out_dim]),
        })
    }

    /// Fuse the localization and VLA maps and score the result.
    pub fn fuse_and_score(
        &self,
        store: &ParamStore,
        m_loc: &Tensor,
        m_vla: &Tensor,
    ) -> Result<FusionOutput> {
        if m_loc.shape() != m_vla.shape() || m_loc.shape() != [self.grid, self.grid] {
            return Err(Error::Shape(format!(
                "map grids must both be [{0}, {0}], got {1:?} and {2:?}",
                self.grid,
                m_loc.shape(),
                m_vla.shape()
            )));
        }
        let mut tape = Tape::new();
        let bp = BoundParams::bind(store, &mut tape);
        let ml = tape.constant(m_loc.clone());
        let mv = tape.constant(m_vla.clone());
        let (f_x, logits) = self.fuse_on_tape(&mut tape, &bp, ml, mv);
        let probs = tape.softmax_rows(logits);
        Ok(FusionOutput {
            fused_feature: tape.value(f_x).clone(),
            local_score: tape.value(probs).data()[1],
        })
    }
}

/// Dice loss between a patch-grid fake-probability map (upsampled bilinearly
/// to the mask resolution) and a ground-truth mask in [0,1].
pub fn dice_loss(m_vla: &Tensor, g: &Tensor) -> Result<f64> {
    validate_mask_range(g)?;
    validate_mask_range(m_vla)?;
    let mut tape = Tape::new();
    let m = tape.constant(m_vla.clone());
    let gn = tape.constant(g.clone());
    let loss = VlaScoring::dice_on_tape(&mut tape, m, gn);
    Ok(tape.scalar_value(loss))
}
