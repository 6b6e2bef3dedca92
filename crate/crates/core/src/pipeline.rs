//! Full-model assembly: the biased-attention global branch, the VLA local
//! branch, the four-term training objective with the orthogonality
//! regularizer, fused inference, the Base..T4 ablation ladder, and the
//! deterministic Adam trainer.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, BackboneOutput, ObserverCache};
use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::params::{Adam, BoundParams, GradMap, ParamStore};
use crate::perceiver::{ForgePerceiver, ForgeryMaskSet, PerceiverConfig};
use crate::seeds;
use crate::synthgen::{Dataset, FrameSample, Split};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::vla::{PromptPair, VlaScoring};

/// Ablation ladder tag. Each variant enables a strict superset of the
/// previous one's components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelVariant {
    Base,
    T1,
    T2,
    T3,
    T4,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 5] =
        [ModelVariant::Base, ModelVariant::T1, ModelVariant::T2, ModelVariant::T3, ModelVariant::T4];

    /// Local-level learning: localization map plus fused local score.
    pub fn has_local(self) -> bool {
        self >= ModelVariant::T1
    }

    /// Biased class-token attention and the trained global head.
    pub fn has_global(self) -> bool {
        self >= ModelVariant::T2
    }

    /// VLA attention map supervision.
    pub fn has_vla(self) -> bool {
        self >= ModelVariant::T3
    }

    /// Identity-prior substitution into the prompts.
    pub fn has_id_prior(self) -> bool {
        self >= ModelVariant::T4
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::Base => "Base",
            ModelVariant::T1 => "T1",
            ModelVariant::T2 => "T2",
            ModelVariant::T3 => "T3",
            ModelVariant::T4 => "T4",
        }
    }
}

impl std::str::FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(ModelVariant::Base),
            "t1" => Ok(ModelVariant::T1),
            "t2" => Ok(ModelVariant::T2),
            "t3" => Ok(ModelVariant::T3),
            "t4" => Ok(ModelVariant::T4),
            other => Err(Error::Validation(format!("unknown variant {other}"))),
        }
    }
}

/// Per-batch loss report. `l_final` is the four-term objective; the
/// orthogonality regularizer is reported separately and added to the
/// optimized objective on top of `l_final`.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_loc: f64,
    pub l_vla: f64,
    pub l_g: f64,
    pub l_l: f64,
    pub l_final: f64,
    pub l_orth: f64,
}

impl LossBreakdown {
    pub fn objective(&self) -> f64 {
        self.l_final + self.l_orth
    }
}

/// Fused inference score for one frame.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ScorePair {
    pub s_g: f64,
    pub s_vla: f64,
    pub s: f64,
    pub alpha: f64,
}

/// Optimizer profile.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct OptimizerProfile {
    pub name: String,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl OptimizerProfile {
    /// Published defaults: Adam at 2e-5 with 5e-4 weight decay, batch 32,
    /// 15 epochs.
    pub fn paper() -> Self {
        OptimizerProfile {
            name: "paper".into(),
            lr: 2e-5,
            weight_decay: 5e-4,
            batch_size: 32,
            epochs: 15,
        }
    }

    /// Desk-scale profile for adapters trained from scratch.
    pub fn toy() -> Self {
        OptimizerProfile {
            name: "toy".into(),
            lr: 1e-3,
            weight_decay: 5e-4,
            batch_size: 16,
            epochs: 30,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "paper" => Ok(Self::paper()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Validation(format!("unknown optimizer profile {other}"))),
        }
    }
}

/// Model structure description (everything but the weights).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub perceiver: PerceiverConfig,
    pub variant: ModelVariant,
    /// Orthogonality regularizer toggle (the loss-ablation knob).
    pub use_orth: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            perceiver: PerceiverConfig::default(),
            variant: ModelVariant::T4,
            use_orth: true,
        }
    }
}

/// Frozen per-frame backbone artifacts; everything the trainable forward
/// needs, cacheable across epochs.
pub struct FrameContext {
    /// Patch-embedding-layer output [n_p, d_p] (pre-transformer).
    pub patch0: Tensor,
    /// Input class embedding [1, d_p].
    pub cls0: Tensor,
    /// Final class token z^(L) [1, d_p].
    pub z_final: Tensor,
    /// Final patch tokens [n_p, d_p].
    pub final_patches: Tensor,
    /// Per-block frozen patch key/value projections.
    pub observer_cache: ObserverCache,
    /// Normalized image feature in text space [1, d_t].
    pub image_features: Tensor,
    pub label: u8,
    /// Ground-truth mask at image resolution.
    pub mask: Tensor,
}

struct ForwardNodes {
    s_g_logits: Option<NodeId>,
    s_vla_logits: Option<NodeId>,
    m_loc: Option<NodeId>,
    m_vla: Option<NodeId>,
    m_hat: Option<NodeId>,
}

pub struct VlaForgeModel {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub perceiver: ForgePerceiver,
    pub scoring: VlaScoring,
    pub prompts: PromptPair,
    /// Trainable parameters only; the backbone holds its own frozen store.
    pub params: ParamStore,
    /// Plain template encodings (placeholder retained), used by the Base
    /// score and by the T3 path.
    plain_features: (Tensor, Tensor),
}

impl VlaForgeModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.backbone.validate()?;
        config.perceiver.validate()?;
        if config.perceiver.backbone_heads != config.backbone.num_heads {
            return Err(Error::Config(format!(
                "perceiver backbone_heads {} must equal backbone num_heads {}",
                config.perceiver.backbone_heads, config.backbone.num_heads
            )));
        }
        let backbone = Backbone::new(config.backbone.clone(), seeds::derive(seed, "backbone", 0))?;
        let perceiver = ForgePerceiver::new(
            config.perceiver.clone(),
            config.backbone.embed_dim,
            config.backbone.grid(),
        )?;
        let scoring = VlaScoring::for_backbone(&backbone);
        let prompts = PromptPair::build(&backbone)?;
        let plain_features = (
            backbone.encode_text_plain(&prompts.real)?,
            backbone.encode_text_plain(&prompts.fake)?,
        );

        let mut params = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seeds::derive(seed, "trainable", 0));
        let variant = config.variant;
        if variant.has_local() {
            perceiver.init_params(&mut params, &mut rng);
            scoring.init_fusion_params(&mut params, &mut rng);
        }
        if variant.has_global() {
            let d = config.backbone.embed_dim;
            params.insert(
                "eta1.w",
                Tensor::randn(&[d, 2], 1.0 / (d as f64).sqrt(), &mut rng),
            );
            params.insert("eta1.b", Tensor::zeros(&[2]));
        }
        if variant.has_vla() {
            scoring.init_phi_params(&mut params, &mut rng);
        }
        if variant.has_id_prior() {
            scoring.init_wid_params(&mut params, &mut rng);
        }

        let mut model = VlaForgeModel {
            config,
            backbone,
            perceiver,
            scoring,
            prompts,
            params,
            plain_features,
        };
        model.strip_unused_params()?;
        Ok(model)
    }

    /// T1 trains the localization path only; the mask-biasing projection g1
    /// belongs to the T2 ladder step.
    fn strip_unused_params(&mut self) -> Result<()> {
        if self.config.variant.has_local() && !self.config.variant.has_global() {
            let mut kept = ParamStore::new();
            let names: Vec<String> = self.params.names().map(str::to_string).collect();
            for name in names {
                if !name.starts_with("g1.") {
                    kept.insert(name.clone(), self.params.get(&name).clone());
                }
            }
            self.params = kept;
        }
        Ok(())
    }

    /// Names the optimizer is allowed to touch, grouped by module prefix.
    pub fn trainable_param_names(&self) -> Vec<String> {
        self.params.names().map(str::to_string).collect()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.params.num_scalars()
    }

    // ── frame preparation ────────────────────────────────────────────────

    /// Run the frozen backbone over one frame and cache every artifact the
    /// trainable forward needs.
    pub fn frame_context(&self, frame: &FrameSample) -> Result<FrameContext> {
        let s = self.config.backbone.image_size;
        if frame.image.shape() != [s, s, 3] {
            return Err(Error::Shape(format!(
                "frame image must be [{s}, {s}, 3], got {:?}",
                frame.image.shape()
            )));
        }
        if frame.mask.shape() != [s, s] {
            return Err(Error::Shape(format!(
                "frame mask must be [{s}, {s}], got {:?}",
                frame.mask.shape()
            )));
        }
        let output = self.backbone.encode_image(&frame.image)?;
        Ok(self.context_from_output(&output, frame.label, frame.mask.clone()))
    }

    fn context_from_output(&self, output: &BackboneOutput, label: u8, mask: Tensor) -> FrameContext {
        let n_p = self.config.backbone.num_patches();
        let d = self.config.backbone.embed_dim;
        FrameContext {
            patch0: output.patch_tokens_per_block[0].reshaped(vec![n_p, d]),
            cls0: output.class_tokens_per_block[0].clone(),
            z_final: output.final_class().clone(),
            final_patches: output.final_patches().reshaped(vec![n_p, d]),
            observer_cache: self.backbone.observer_cache(output),
            image_features: self.backbone.image_features(output),
            label,
            mask,
        }
    }

    // ── forward ──────────────────────────────────────────────────────────

    fn forward_frame(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        ctx: &FrameContext,
    ) -> Result<ForwardNodes> {
        let variant = self.config.variant;
        let mut nodes = ForwardNodes {
            s_g_logits: None,
            s_vla_logits: None,
            m_loc: None,
            m_vla: None,
            m_hat: None,
        };
        if !variant.has_local() {
            return Ok(nodes);
        }

        let v_in = tape.constant(ctx.patch0.clone());
        let (v_out, q_out) = self.perceiver.run_on_tape(tape, bp, v_in);
        let (_m_tilde, m_loc) = self.perceiver.localization_on_tape(tape, bp, v_out, q_out);
        nodes.m_loc = Some(m_loc);

        if variant.has_global() {
            let (m, m_hat) = self.perceiver.head_masks_on_tape(tape, bp, v_out, q_out);
            nodes.m_hat = Some(m_hat);
            let q = self.config.perceiver.num_queries;
            let d = self.config.backbone.embed_dim;
            let mut replicas = Tensor::zeros(&[q, d]);
            for j in 0..q {
                replicas.data_mut()[j * d..(j + 1) * d].copy_from_slice(ctx.cls0.data());
            }
            let reps = tape.constant(replicas);
            let refined = self.backbone.observe_on_tape(tape, &ctx.observer_cache, reps, Some(m));
            let pooled = tape.mean_axis0(refined);
            nodes.s_g_logits = Some(tape.linear(pooled, bp.id("eta1.w"), bp.id("eta1.b")));
        }

        if variant.has_vla() {
            let patches = tape.constant(ctx.final_patches.clone());
            let (f_r, f_f) = if variant.has_id_prior() {
                let z = tape.constant(ctx.z_final.clone());
                self.scoring.id_prompts_on_tape(&self.backbone, tape, bp, &self.prompts, z)?
            } else {
                (
                    tape.constant(self.plain_features.0.clone()),
                    tape.constant(self.plain_features.1.clone()),
                )
            };
            nodes.m_vla = Some(self.scoring.vla_map_on_tape(tape, bp, patches, f_r, f_f));
        }

        let g = self.config.backbone.grid();
        let vla_grid = match nodes.m_vla {
            Some(v) => tape.reshape(v, vec![g, g]),
            None => tape.constant(Tensor::filled(&[g, g], 1.0)),
        };
        let (_f_x, logits) = self.scoring.fuse_on_tape(tape, bp, m_loc, vla_grid);
        nodes.s_vla_logits = Some(logits);
        Ok(nodes)
    }

    /// Loss nodes for one frame. Gated terms are absent, which makes them
    /// exactly zero in the reported breakdown.
    fn frame_losses(
        &self,
        tape: &mut Tape,
        nodes: &ForwardNodes,
        ctx: &FrameContext,
    ) -> FrameLossNodes {
        let variant = self.config.variant;
        let mut out = FrameLossNodes::default();
        let mask = tape.constant(ctx.mask.clone());
        if let Some(m_loc) = nodes.m_loc {
            out.l_loc = Some(ForgePerceiver::localization_loss_on_tape(tape, m_loc, mask));
        }
        if let Some(logits) = nodes.s_vla_logits {
            out.l_l = Some(ce_on_tape(tape, logits, ctx.label));
        }
        if let Some(logits) = nodes.s_g_logits {
            out.l_g = Some(ce_on_tape(tape, logits, ctx.label));
        }
        if let Some(m_vla) = nodes.m_vla {
            let g = self.config.backbone.grid();
            let grid = tape.reshape(m_vla, vec![g, g]);
            out.l_vla = Some(VlaScoring::dice_on_tape(tape, grid, mask));
        }
        if self.config.use_orth && variant.has_global() {
            if let Some(m_hat) = nodes.m_hat {
                out.l_orth = Some(ForgePerceiver::orthogonality_on_tape(tape, m_hat));
            }
        }
        out
    }

    /// Forward plus backward for one frame; returns its loss contributions
    /// and parameter gradients of the optimized objective.
    fn frame_gradients(&self, ctx: &FrameContext) -> Result<(LossBreakdown, GradMap)> {
        let mut tape = Tape::new();
        let bp = BoundParams::bind(&self.params, &mut tape);
        let nodes = self.forward_frame(&mut tape, &bp, ctx)?;
        let losses = self.frame_losses(&mut tape, &nodes, ctx);
        let breakdown = losses.breakdown(&tape);
        let objective = losses.objective(&mut tape);
        let grads = tape.backward(objective);
        Ok((breakdown, bp.grads(&self.params, &grads)))
    }

    /// Batch-mean losses without any parameter update.
    pub fn training_losses(&self, frames: &[FrameSample]) -> Result<LossBreakdown> {
        if frames.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        if !self.config.variant.has_local() {
            return Ok(LossBreakdown::default());
        }
        let mut acc = LossBreakdown::default();
        for frame in frames {
            let ctx = self.frame_context(frame)?;
            let mut tape = Tape::new();
            let bp = BoundParams::bind(&self.params, &mut tape);
            let nodes = self.forward_frame(&mut tape, &bp, &ctx)?;
            let losses = self.frame_losses(&mut tape, &nodes, &ctx);
            acc.accumulate(&losses.breakdown(&tape));
        }
        acc.scale(1.0 / frames.len() as f64);
        Ok(acc)
    }

    /// Batch-mean optimized objective (the four-term loss plus the
    /// orthogonality regularizer when enabled).
    pub fn batch_objective(&self, contexts: &[&FrameContext]) -> Result<f64> {
        let mut total = 0.0;
        for ctx in contexts {
            let mut tape = Tape::new();
            let bp = BoundParams::bind(&self.params, &mut tape);
            let nodes = self.forward_frame(&mut tape, &bp, ctx)?;
            let losses = self.frame_losses(&mut tape, &nodes, ctx);
            let breakdown = losses.breakdown(&tape);
            total += breakdown.objective();
        }
        Ok(total / contexts.len() as f64)
    }

    /// Batch-mean losses and gradients, parallel over frames with a
    /// deterministic in-order reduction.
    pub fn batch_gradients(&self, contexts: &[&FrameContext]) -> Result<(LossBreakdown, GradMap)> {
        if contexts.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let per_frame: Vec<Result<(LossBreakdown, GradMap)>> =
            contexts.par_iter().map(|ctx| self.frame_gradients(ctx)).collect();
        let mut breakdown = LossBreakdown::default();
        let mut grads = GradMap::zeros_like(&self.params);
        for item in per_frame {
            let (b, g) = item?;
            breakdown.accumulate(&b);
            grads.add_assign(&g);
        }
        let scale = 1.0 / contexts.len() as f64;
        breakdown.scale(scale);
        grads.scale_assign(scale);
        Ok((breakdown, grads))
    }

    // ── inference ────────────────────────────────────────────────────────

    /// Frozen-similarity score: softmax over the cosines between the image
    /// feature and the plain template encodings, fake side.
    pub fn base_variant_score(&self, frame: &FrameSample) -> Result<f64> {
        let ctx = self.frame_context(frame)?;
        Ok(self.base_score_from_ctx(&ctx))
    }

    fn base_score_from_ctx(&self, ctx: &FrameContext) -> f64 {
        let cos = |f: &Tensor| -> f64 {
            ctx.image_features.data().iter().zip(f.data()).map(|(a, b)| a * b).sum()
        };
        let c_r = cos(&self.plain_features.0);
        let c_f = cos(&self.plain_features.1);
        let m = c_r.max(c_f);
        let e_r = (c_r - m).exp();
        let e_f = (c_f - m).exp();
        e_f / (e_r + e_f)
    }

    /// Both branch scores for one prepared frame context.
    pub fn branch_scores(&self, ctx: &FrameContext) -> Result<(f64, f64)> {
        let variant = self.config.variant;
        if !variant.has_local() {
            let s = self.base_score_from_ctx(ctx);
            return Ok((s, s));
        }
        let mut tape = Tape::new();
        let bp = BoundParams::bind(&self.params, &mut tape);
        let nodes = self.forward_frame(&mut tape, &bp, ctx)?;
        let s_vla = prob_from_logits(&tape, nodes.s_vla_logits.expect("local branch present"));
        let s_g = match nodes.s_g_logits {
            Some(logits) => prob_from_logits(&tape, logits),
            // Below T2 the global branch is the frozen similarity score.
            None => self.base_score_from_ctx(ctx),
        };
        Ok((s_g, s_vla))
    }

    /// Fused inference score s = alpha * s_g + (1 - alpha) * s_VLA.
    pub fn infer(&self, frame: &FrameSample, alpha: f64) -> Result<ScorePair> {
        let ctx = self.frame_context(frame)?;
        self.infer_ctx(&ctx, alpha)
    }

    pub fn infer_ctx(&self, ctx: &FrameContext, alpha: f64) -> Result<ScorePair> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Validation(format!("alpha {alpha} must lie in [0, 1]")));
        }
        let (s_g, s_vla) = self.branch_scores(ctx)?;
        Ok(ScorePair { s_g, s_vla, s: alpha * s_g + (1.0 - alpha) * s_vla, alpha })
    }

    /// Global-branch score from a prepared backbone output and mask set.
    pub fn global_score(&self, output: &BackboneOutput, masks: &ForgeryMaskSet) -> Result<f64> {
        if !self.config.variant.has_global() {
            return Err(Error::Config(format!(
                "variant {} has no trained global branch",
                self.config.variant.as_str()
            )));
        }
        let h = self.config.backbone.num_heads;
        let q = self.config.perceiver.num_queries;
        let n_p = self.config.backbone.num_patches();
        if masks.head_masks.shape() != [h, q, self.config.backbone.grid(), self.config.backbone.grid()]
        {
            return Err(Error::Shape(format!(
                "head masks must be [{h}, {q}, grid, grid], got {:?}",
                masks.head_masks.shape()
            )));
        }
        let cache = self.backbone.observer_cache(output);
        let d = self.config.backbone.embed_dim;
        let cls0 = &output.class_tokens_per_block[0];
        let mut replicas = Tensor::zeros(&[q, d]);
        for j in 0..q {
            replicas.data_mut()[j * d..(j + 1) * d].copy_from_slice(cls0.data());
        }
        let mut tape = Tape::new();
        let bp = BoundParams::bind(&self.params, &mut tape);
        let reps = tape.constant(replicas);
        let bias = tape.constant(masks.head_masks.reshaped(vec![h * q, n_p]));
        let refined = self.backbone.observe_on_tape(&mut tape, &cache, reps, Some(bias));
        let pooled = tape.mean_axis0(refined);
        let logits = tape.linear(pooled, bp.id("eta1.w"), bp.id("eta1.b"));
        Ok(prob_from_logits(&tape, logits))
    }

    /// Mask artifacts for one frame (empty below T1).
    pub fn mask_artifacts(&self, frame: &FrameSample) -> Result<ModelMaps> {
        let ctx = self.frame_context(frame)?;
        let g = self.config.backbone.grid();
        if !self.config.variant.has_local() {
            return Err(Error::Config("variant Base produces no maps".into()));
        }
        let mut tape = Tape::new();
        let bp = BoundParams::bind(&self.params, &mut tape);
        let nodes = self.forward_frame(&mut tape, &bp, &ctx)?;
        // Recompute the query masks for export.
        let v_in = tape.constant(ctx.patch0.clone());
        let (v_out, q_out) = self.perceiver.run_on_tape(&mut tape, &bp, v_in);
        let (_, m_hat) = self.perceiver.head_masks_on_tape(&mut tape, &bp, v_out, q_out);
        let m_loc = tape.value(nodes.m_loc.expect("local branch")).clone();
        let m_vla = nodes
            .m_vla
            .map(|n| tape.value(n).reshaped(vec![g, g]))
            .unwrap_or_else(|| Tensor::filled(&[g, g], 1.0));
        let fused = m_loc.mul(&m_vla);
        Ok(ModelMaps {
            query_masks: tape.value(m_hat).reshaped(vec![self.config.perceiver.num_queries, g, g]),
            loc_map: m_loc,
            vla_map: m_vla,
            fused_map: fused,
        })
    }

    // ── persistence ──────────────────────────────────────────────────────

    fn header(
        &self,
        epochs_done: usize,
        profile: Option<&OptimizerProfile>,
        seed: u64,
        adam_steps: u64,
    ) -> serde_json::Value {
        serde_json::json!({
            "model": {
                "backbone": self.config.backbone,
                "perceiver": self.config.perceiver,
                "variant": self.config.variant,
                "use_orth": self.config.use_orth,
            },
            "epochs_done": epochs_done,
            "profile": profile,
            "seed": seed,
            "adam_steps": adam_steps,
        })
    }

    fn write_tensors(&self, container: &mut Container) {
        for (name, t) in self.backbone.frozen_params().iter() {
            container.add(format!("backbone.{name}"), t.clone());
        }
        for (name, t) in self.params.iter() {
            container.add(format!("trainable.{name}"), t.clone());
        }
    }

    /// Write weights (frozen and trainable) without optimizer state.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut container = Container::new("model", self.header(0, None, 0, 0));
        self.write_tensors(&mut container);
        container.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let container = Container::read(path)?;
        Self::from_container(&container).map(|(m, _, _)| m)
    }

    fn from_container(container: &Container) -> Result<(Self, usize, Option<OptimizerProfile>)> {
        if container.kind != "model" {
            return Err(Error::Checkpoint(format!(
                "expected a model container, got {}",
                container.kind
            )));
        }
        let model_header = container
            .header
            .get("model")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("missing model header".into()))?;
        let config: ModelConfig = serde_json::from_value(model_header)
            .map_err(|e| Error::Checkpoint(format!("bad model header: {e}")))?;
        let epochs_done = container
            .header
            .get("epochs_done")
            .and_then(|v| v.as_u64())
            .unwrap_or(0) as usize;
        let profile = container
            .header
            .get("profile")
            .and_then(|v| serde_json::from_value(v.clone()).ok());
        let seed = container.header.get("seed").and_then(|v| v.as_u64()).unwrap_or(0);

        let mut model = VlaForgeModel::new(config, seed)?;
        // Overwrite every tensor from the container.
        let backbone_params = {
            let mut store = ParamStore::new();
            for name in model.backbone.frozen_params().names().map(str::to_string).collect::<Vec<_>>() {
                let t = container.get(&format!("backbone.{name}"))?;
                store.insert(name, t.clone());
            }
            store
        };
        model.backbone.replace_params(backbone_params)?;
        // Prompt embeddings and plain template features are derived from the
        // frozen weights and must be rebuilt after the swap.
        model.prompts = PromptPair::build(&model.backbone)?;
        model.plain_features = (
            model.backbone.encode_text_plain(&model.prompts.real)?,
            model.backbone.encode_text_plain(&model.prompts.fake)?,
        );
        let names: Vec<String> = model.params.names().map(str::to_string).collect();
        for name in names {
            let t = container.get(&format!("trainable.{name}"))?;
            if t.shape() != model.params.get(&name).shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?} does not match the model",
                    t.shape()
                )));
            }
            *model.params.get_mut(&name) = t.clone();
        }
        Ok((model, epochs_done, profile))
    }
}

/// Exportable map artifacts of one frame.
pub struct ModelMaps {
    pub query_masks: Tensor,
    pub loc_map: Tensor,
    pub vla_map: Tensor,
    pub fused_map: Tensor,
}

#[derive(Default)]
struct FrameLossNodes {
    l_loc: Option<NodeId>,
    l_vla: Option<NodeId>,
    l_g: Option<NodeId>,
    l_l: Option<NodeId>,
    l_orth: Option<NodeId>,
}

impl FrameLossNodes {
    fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let v = |n: Option<NodeId>| n.map(|id| tape.scalar_value(id)).unwrap_or(0.0);
        let (l_loc, l_vla, l_g, l_l, l_orth) =
            (v(self.l_loc), v(self.l_vla), v(self.l_g), v(self.l_l), v(self.l_orth));
        LossBreakdown { l_loc, l_vla, l_g, l_l, l_final: l_loc + l_vla + l_g + l_l, l_orth }
    }

    /// Single scalar node: the four-term loss plus the regularizer.
    fn objective(&self, tape: &mut Tape) -> NodeId {
        let mut total: Option<NodeId> = None;
        for term in [self.l_loc, self.l_vla, self.l_g, self.l_l, self.l_orth].into_iter().flatten() {
            total = Some(match total {
                Some(t) => tape.add(t, term),
                None => term,
            });
        }
        total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)))
    }
}

impl LossBreakdown {
    fn accumulate(&mut self, other: &LossBreakdown) {
        self.l_loc += other.l_loc;
        self.l_vla += other.l_vla;
        self.l_g += other.l_g;
        self.l_l += other.l_l;
        self.l_final += other.l_final;
        self.l_orth += other.l_orth;
    }

    fn scale(&mut self, c: f64) {
        self.l_loc *= c;
        self.l_vla *= c;
        self.l_g *= c;
        self.l_l *= c;
        self.l_final *= c;
        self.l_orth *= c;
    }
}

fn ce_on_tape(tape: &mut Tape, logits: NodeId, label: u8) -> NodeId {
    let ls = tape.log_softmax_rows(logits);
    let pick = tape.slice_cols(ls, label as usize, 1);
    let pick = tape.reshape(pick, vec![1]);
    tape.scale(pick, -1.0)
}

fn prob_from_logits(tape: &Tape, logits: NodeId) -> f64 {
    let t = tape.value(logits);
    let (a, b) = (t.data()[0], t.data()[1]);
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    eb / (ea + eb)
}

// ── trainer ──────────────────────────────────────────────────────────────

/// Per-epoch mean losses, one line of the loss log.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    #[serde(rename = "L_loc")]
    pub l_loc: f64,
    #[serde(rename = "L_VLA")]
    pub l_vla: f64,
    #[serde(rename = "L_G")]
    pub l_g: f64,
    #[serde(rename = "L_L")]
    pub l_l: f64,
    #[serde(rename = "L_orth")]
    pub l_orth: f64,
}

/// Deterministic single-process trainer.
pub struct Trainer {
    pub model: VlaForgeModel,
    pub profile: OptimizerProfile,
    pub seed: u64,
    pub epochs_done: usize,
    optimizer: Adam,
}

impl Trainer {
    pub fn new(model: VlaForgeModel, profile: OptimizerProfile, seed: u64) -> Self {
        let optimizer = Adam::new(&model.params, profile.lr, profile.weight_decay);
        Trainer { model, profile, seed, epochs_done: 0, optimizer }
    }

    /// Prepare frozen contexts for every train-split frame, in manifest order.
    pub fn prepare_contexts(&self, dataset: &Dataset) -> Result<Vec<FrameContext>> {
        let records = dataset.split_records(Split::Train);
        let mut jobs = Vec::new();
        for rec in records {
            for k in 0..rec.num_frames {
                jobs.push((rec, k));
            }
        }
        let contexts: Vec<Result<FrameContext>> = jobs
            .par_iter()
            .map(|(rec, k)| {
                let frame = dataset.load_frame(rec, *k)?;
                self.model.frame_context(&frame)
            })
            .collect();
        contexts.into_iter().collect()
    }

    /// Train until `self.profile.epochs`, invoking `on_epoch` after each
    /// epoch. Returns the per-epoch loss log for the epochs run here.
    pub fn run(
        &mut self,
        contexts: &[FrameContext],
        mut on_epoch: impl FnMut(&EpochLosses),
    ) -> Result<Vec<EpochLosses>> {
        if contexts.is_empty() {
            return Err(Error::Validation("training needs at least one frame".into()));
        }
        if !self.model.config.variant.has_local() {
            return Err(Error::Validation(
                "variant Base has no trainable parameters; nothing to train".into(),
            ));
        }
        let mut log = Vec::new();
        let n = contexts.len();
        while self.epochs_done < self.profile.epochs {
            let epoch = self.epochs_done + 1;
            let order = shuffled_indices(n, seeds::derive(self.seed, "shuffle", epoch as u64));
            let mut sums = LossBreakdown::default();
            let mut batches = 0.0;
            for chunk in order.chunks(self.profile.batch_size) {
                let batch: Vec<&FrameContext> = chunk.iter().map(|&i| &contexts[i]).collect();
                let (breakdown, grads) = self.model.batch_gradients(&batch)?;
                if !breakdown.objective().is_finite() {
                    return Err(Error::Validation(format!(
                        "training diverged at epoch {epoch}: non-finite loss"
                    )));
                }
                self.optimizer.step(&mut self.model.params, &grads);
                sums.accumulate(&breakdown);
                batches += 1.0;
            }
            sums.scale(1.0 / batches);
            let entry = EpochLosses {
                epoch,
                l_loc: sums.l_loc,
                l_vla: sums.l_vla,
                l_g: sums.l_g,
                l_l: sums.l_l,
                l_orth: sums.l_orth,
            };
            on_epoch(&entry);
            log.push(entry);
            self.epochs_done = epoch;
        }
        Ok(log)
    }

    /// Run a fixed number of optimizer steps over the given contexts
    /// (cycling), without epoch bookkeeping.
    pub fn run_steps(&mut self, contexts: &[FrameContext], steps: usize) -> Result<()> {
        let n = contexts.len();
        for step in 0..steps {
            let start = (step * self.profile.batch_size) % n;
            let batch: Vec<&FrameContext> = (0..self.profile.batch_size.min(n))
                .map(|i| &contexts[(start + i) % n])
                .collect();
            let (breakdown, grads) = self.model.batch_gradients(&batch)?;
            if !breakdown.objective().is_finite() {
                return Err(Error::Validation("training diverged: non-finite loss".into()));
            }
            self.optimizer.step(&mut self.model.params, &grads);
        }
        Ok(())
    }

    /// Checkpoint with optimizer state for exact resume.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut container = Container::new(
            "model",
            self.model.header(
                self.epochs_done,
                Some(&self.profile),
                self.seed,
                self.optimizer.step_count,
            ),
        );
        self.model.write_tensors(&mut container);
        for (name, t) in self.optimizer.state_tensors() {
            container.add(name, t.clone());
        }
        container.write(path)
    }

    /// Restore a trainer (model, optimizer moments, epoch counter).
    pub fn load(path: &Path) -> Result<Trainer> {
        let container = Container::read(path)?;
        let (model, epochs_done, profile) = VlaForgeModel::from_container(&container)?;
        let profile = profile
            .ok_or_else(|| Error::Checkpoint("checkpoint lacks an optimizer profile".into()))?;
        let seed = container.header.get("seed").and_then(|v| v.as_u64()).unwrap_or(0);
        let mut optimizer = Adam::new(&model.params, profile.lr, profile.weight_decay);
        for name in container.names().map(str::to_string).collect::<Vec<_>>() {
            if name.starts_with("adam.") {
                let t = container.get(&name)?.clone();
                if !optimizer.restore_state(&name, t) {
                    return Err(Error::Checkpoint(format!("orphan optimizer tensor {name}")));
                }
            }
        }
        // Bias correction must resume from the recorded step count.
        optimizer.step_count = container
            .header
            .get("adam_steps")
            .and_then(|v| v.as_u64())
            .unwrap_or(0);
        Ok(Trainer { model, profile, seed, epochs_done, optimizer })
    }
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rand::Rng::gen_range(&mut rng, 0..=i);
        idx.swap(i, j);
    }
    idx
}

#[cfg(test)]
mod tests;
