//! Frozen toy vision-language backbone.
//!
//! A small ViT visual encoder plus a causal text encoder, randomly
//! initialized and then frozen. It exposes exactly three hooks the rest of
//! the framework needs: per-block visual tokens, an observer path that runs
//! replicated class tokens through the frozen blocks with an injectable
//! attention bias, and text encoding with token-embedding substitution.

mod text;
mod tokenizer;

pub use text::TextPromptEmbedding;
pub use tokenizer::{ClassTag, Tokenizer, ID_PLACEHOLDER};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Container};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{NodeId, Tape};
use crate::tensor::{layer_norm_rows, softmax_rows, Tensor, LN_EPS};

/// Hidden width multiplier of every transformer MLP in the backbone.
const MLP_RATIO: usize = 4;
/// Depth and head count of the text encoder (the visual ones are configured).
const TEXT_BLOCKS: usize = 2;
const TEXT_HEADS: usize = 4;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct BackboneConfig {
    /// Square input resolution in pixels.
    pub image_size: usize,
    /// Square patch size in pixels.
    pub patch_size: usize,
    /// Number of visual transformer blocks L.
    pub num_blocks: usize,
    /// Visual embedding dimension d_p.
    pub embed_dim: usize,
    /// Visual attention heads H.
    pub num_heads: usize,
    /// Text vocabulary capacity.
    pub text_vocab: usize,
    /// Maximum tokenized prompt length.
    pub text_len_max: usize,
    /// Text token embedding dimension d_tk.
    pub text_token_dim: usize,
    /// Shared text/image output dimension d_t.
    pub text_out_dim: usize,
    /// Whether the backbone is frozen (always true in this artifact).
    pub frozen: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_size: 64,
            patch_size: 8,
            num_blocks: 4,
            embed_dim: 64,
            num_heads: 4,
            text_vocab: 256,
            text_len_max: 16,
            text_token_dim: 64,
            text_out_dim: 64,
            frozen: true,
        }
    }
}

impl BackboneConfig {
    /// Patch-grid side length (h_p = w_p).
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of patch tokens.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Per-head dimension d.
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            problems.push(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            problems.push(format!(
                "embed_dim {} must be divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_blocks == 0 {
            problems.push("num_blocks must be >= 1".into());
        }
        if self.text_token_dim == 0 || self.text_token_dim % TEXT_HEADS != 0 {
            problems.push(format!(
                "text_token_dim {} must be divisible by {TEXT_HEADS}",
                self.text_token_dim
            ));
        }
        if self.text_len_max < 4 {
            problems.push("text_len_max must be >= 4".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Per-block outputs of the frozen visual encoder. Index 0 holds the input
/// embeddings (post patch projection and position embedding, pre-transformer).
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    /// L+1 class tokens, each [1, d_p].
    pub class_tokens_per_block: Vec<Tensor>,
    /// L+1 patch-token grids, each [h_p, w_p, d_p].
    pub patch_tokens_per_block: Vec<Tensor>,
}

impl BackboneOutput {
    /// Final class token z^(L), shape [1, d_p].
    pub fn final_class(&self) -> &Tensor {
        self.class_tokens_per_block.last().unwrap()
    }

    /// Final patch tokens P, shape [h_p, w_p, d_p].
    pub fn final_patches(&self) -> &Tensor {
        self.patch_tokens_per_block.last().unwrap()
    }

    pub fn is_finite(&self) -> bool {
        self.class_tokens_per_block.iter().all(Tensor::is_finite)
            && self.patch_tokens_per_block.iter().all(Tensor::is_finite)
    }
}

/// Frozen per-block key/value projections of the patch stream, reused by
/// every observer pass over the same frame.
#[derive(Clone, Debug)]
pub struct ObserverCache {
    /// Per block: (K_P, V_P), each [n_p, d_p].
    pub per_block: Vec<(Tensor, Tensor)>,
}

/// References to one transformer block's weights inside the store.
struct BlockRefs<'a> {
    ln1g: &'a Tensor,
    ln1b: &'a Tensor,
    wq: &'a Tensor,
    bq: &'a Tensor,
    wk: &'a Tensor,
    bk: &'a Tensor,
    wv: &'a Tensor,
    bv: &'a Tensor,
    wo: &'a Tensor,
    bo: &'a Tensor,
    ln2g: &'a Tensor,
    ln2b: &'a Tensor,
    fc1w: &'a Tensor,
    fc1b: &'a Tensor,
    fc2w: &'a Tensor,
    fc2b: &'a Tensor,
}

pub struct Backbone {
    pub config: BackboneConfig,
    params: ParamStore,
    tokenizer: Tokenizer,
}

impl Backbone {
    /// Randomly initialized, then frozen. Deterministic in `seed`.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.embed_dim;
        let patch_in = config.patch_size * config.patch_size * 3;

        let lin = |rng: &mut ChaCha20Rng, fan_in: usize, shape: &[usize]| {
            Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), rng)
        };

        params.insert("patch_embed.w", random_filter_bank(patch_in, d, config.patch_size, &mut rng));
        params.insert("patch_embed.b", Tensor::zeros(&[d]));
        params.insert("cls_embed", Tensor::randn(&[1, d], 0.5, &mut rng));
        params.insert(
            "pos_embed",
            Tensor::randn(&[1 + config.num_patches(), d], 0.3, &mut rng),
        );
        for l in 0..config.num_blocks {
            insert_block(&mut params, &format!("vis.block{l}"), d, &mut rng);
        }
        params.insert("vis.ln_post.g", Tensor::filled(&[d], 1.0));
        params.insert("vis.ln_post.b", Tensor::zeros(&[d]));
        params.insert("vis.proj", lin(&mut rng, d, &[d, config.text_out_dim]));

        let dt = config.text_token_dim;
        params.insert("text.embed", Tensor::randn(&[config.text_vocab, dt], 0.5, &mut rng));
        params.insert("text.pos", Tensor::randn(&[config.text_len_max, dt], 0.3, &mut rng));
        for l in 0..TEXT_BLOCKS {
            insert_block(&mut params, &format!("text.block{l}"), dt, &mut rng);
        }
        params.insert("text.ln_final.g", Tensor::filled(&[dt], 1.0));
        params.insert("text.ln_final.b", Tensor::zeros(&[dt]));
        params.insert("text.proj", lin(&mut rng, dt, &[dt, config.text_out_dim]));

        Ok(Backbone { config, params, tokenizer: Tokenizer::new() })
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    /// Checksum of every frozen parameter; used by the frozen-backbone audit.
    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Read-only view of the frozen parameter store.
    pub fn frozen_params(&self) -> &ParamStore {
        &self.params
    }

    /// Swap in externally loaded frozen weights; names and shapes must match.
    pub fn replace_params(&mut self, params: ParamStore) -> Result<()> {
        for name in self.params.names() {
            if !params.contains(name) {
                return Err(Error::Checkpoint(format!("missing backbone tensor {name}")));
            }
            if params.get(name).shape() != self.params.get(name).shape() {
                return Err(Error::Checkpoint(format!("backbone tensor {name} has a wrong shape")));
            }
        }
        if params.len() != self.params.len() {
            return Err(Error::Checkpoint("unexpected extra backbone tensors".into()));
        }
        self.params = params;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn block(&self, prefix: &str) -> BlockRefs<'_> {
        let p = |suffix: &str| self.params.get(&format!("{prefix}.{suffix}"));
        BlockRefs {
            ln1g: p("ln1.g"),
            ln1b: p("ln1.b"),
            wq: p("attn.wq"),
            bq: p("attn.bq"),
            wk: p("attn.wk"),
            bk: p("attn.bk"),
            wv: p("attn.wv"),
            bv: p("attn.bv"),
            wo: p("attn.wo"),
            bo: p("attn.bo"),
            ln2g: p("ln2.g"),
            ln2b: p("ln2.b"),
            fc1w: p("mlp.fc1.w"),
            fc1b: p("mlp.fc1.b"),
            fc2w: p("mlp.fc2.w"),
            fc2b: p("mlp.fc2.b"),
        }
    }

    // ── image path ───────────────────────────────────────────────────────

    /// Frozen forward pass over one image in [0,1], shape [h, w, 3].
    pub fn encode_image(&self, image: &Tensor) -> Result<BackboneOutput> {
        let s = self.config.image_size;
        if image.shape() != [s, s, 3] {
            return Err(Error::Shape(format!(
                "expected image [{s}, {s}, 3], got {:?}",
                image.shape()
            )));
        }
        let grid = self.config.grid();
        let d = self.config.embed_dim;
        let n_p = self.config.num_patches();

        // Patchify: one row per patch, p*p*3 values in row-major pixel order.
        let p = self.config.patch_size;
        let mut rows = Tensor::zeros(&[n_p, p * p * 3]);
        for gi in 0..grid {
            for gj in 0..grid {
                let row = gi * grid + gj;
                for pi in 0..p {
                    for pj in 0..p {
                        for c in 0..3 {
                            let src = ((gi * p + pi) * s + (gj * p + pj)) * 3 + c;
                            rows.data_mut()[row * p * p * 3 + (pi * p + pj) * 3 + c] =
                                image.data()[src];
                        }
                    }
                }
            }
        }

        let pos = self.params.get("pos_embed");
        let mut patches = rows
            .matmul(self.params.get("patch_embed.w"))
            .add(&broadcast_rows(self.params.get("patch_embed.b"), n_p));
        for i in 0..n_p {
            for j in 0..d {
                patches.data_mut()[i * d + j] += pos.data()[(1 + i) * d + j];
            }
        }
        let mut cls = self.params.get("cls_embed").clone();
        for j in 0..d {
            cls.data_mut()[j] += pos.data()[j];
        }

        let mut class_tokens = vec![cls.clone()];
        let mut patch_tokens = vec![patches.reshaped(vec![grid, grid, d])];
        let mut x = stack_rows(&cls, &patches);
        for l in 0..self.config.num_blocks {
            x = block_forward(&x, &self.block(&format!("vis.block{l}")), self.config.num_heads, false);
            class_tokens.push(slice_rows_plain(&x, 0, 1));
            patch_tokens.push(slice_rows_plain(&x, 1, n_p).reshaped(vec![grid, grid, d]));
        }
        let out = BackboneOutput {
            class_tokens_per_block: class_tokens,
            patch_tokens_per_block: patch_tokens,
        };
        debug_assert!(out.is_finite());
        Ok(out)
    }

    /// CLIP-style image feature: post-LN class token projected into the
    /// shared text space and L2-normalized. Shape [1, d_t].
    pub fn image_features(&self, output: &BackboneOutput) -> Tensor {
        let z = layer_norm_rows(
            output.final_class(),
            self.params.get("vis.ln_post.g"),
            self.params.get("vis.ln_post.b"),
            LN_EPS,
        );
        l2_normalize(&z.matmul(self.params.get("vis.proj")))
    }

    /// Frozen patch key/value projections per block, for observer passes.
    pub fn observer_cache(&self, output: &BackboneOutput) -> ObserverCache {
        let n_p = self.config.num_patches();
        let d = self.config.embed_dim;
        let per_block = (0..self.config.num_blocks)
            .map(|l| {
                let refs = self.block(&format!("vis.block{l}"));
                let p = output.patch_tokens_per_block[l].reshaped(vec![n_p, d]);
                let pn = layer_norm_rows(&p, refs.ln1g, refs.ln1b, LN_EPS);
                let k = pn.matmul(refs.wk).add(&broadcast_rows(refs.bk, n_p));
                let v = pn.matmul(refs.wv).add(&broadcast_rows(refs.bv, n_p));
                (k, v)
            })
            .collect();
        ObserverCache { per_block }
    }

    /// Observer path on a tape: runs `replicas` [q, d_p] through the frozen
    /// blocks, each replica attending over itself plus the frozen patch
    /// tokens, with `bias` [H*q, n_p] (head-major) added to the patch-position
    /// attention logits of every block. Returns the refined tokens [q, d_p].
    pub fn observe_on_tape(
        &self,
        tape: &mut Tape,
        cache: &ObserverCache,
        replicas: NodeId,
        bias: Option<NodeId>,
    ) -> NodeId {
        let h = self.config.num_heads;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let q = tape.value(replicas).dims2().0;

        let mut z = replicas;
        for l in 0..self.config.num_blocks {
            let refs = self.block(&format!("vis.block{l}"));
            let (k_p, v_p) = &cache.per_block[l];
            let ln1g = tape.constant(refs.ln1g.clone());
            let ln1b = tape.constant(refs.ln1b.clone());
            let zn = tape.layer_norm(z, ln1g, ln1b, LN_EPS);

            let wq = tape.constant(refs.wq.clone());
            let bq = tape.constant(refs.bq.clone());
            let wk = tape.constant(refs.wk.clone());
            let bk = tape.constant(refs.bk.clone());
            let wv = tape.constant(refs.wv.clone());
            let bv = tape.constant(refs.bv.clone());
            let q_all = tape.linear(zn, wq, bq);
            let k_self = tape.linear(zn, wk, bk);
            let v_self = tape.linear(zn, wv, bv);

            let mut head_outs = Vec::with_capacity(h);
            for i in 0..h {
                let q_i = tape.slice_cols(q_all, i * dh, dh);
                let ks_i = tape.slice_cols(k_self, i * dh, dh);
                let vs_i = tape.slice_cols(v_self, i * dh, dh);
                let kp_i = tape.constant(slice_cols_plain(k_p, i * dh, dh).transposed());
                let vp_i = tape.constant(slice_cols_plain(v_p, i * dh, dh));

                let self_logit = tape.row_dot(q_i, ks_i);
                let self_logit = tape.scale(self_logit, scale);
                let patch_logits = tape.matmul(q_i, kp_i);
                let mut patch_logits = tape.scale(patch_logits, scale);
                if let Some(b) = bias {
                    let b_i = tape.slice_rows(b, i * q, q);
                    patch_logits = tape.add(patch_logits, b_i);
                }
                let logits = tape.concat_cols(&[self_logit, patch_logits]);
                let attn = tape.softmax_rows(logits);
                let w_self = tape.slice_cols(attn, 0, 1);
                let w_patch = tape.slice_cols(attn, 1, tape.value(kp_i).dims2().1);
                let out_self = tape.scale_rows(vs_i, w_self);
                let out_patch = tape.matmul(w_patch, vp_i);
                head_outs.push(tape.add(out_self, out_patch));
            }
            let attn_out = tape.concat_cols(&head_outs);
            let wo = tape.constant(refs.wo.clone());
            let bo = tape.constant(refs.bo.clone());
            let attn_out = tape.linear(attn_out, wo, bo);
            let x = tape.add(z, attn_out);

            let ln2g = tape.constant(refs.ln2g.clone());
            let ln2b = tape.constant(refs.ln2b.clone());
            let xn = tape.layer_norm(x, ln2g, ln2b, LN_EPS);
            let fc1w = tape.constant(refs.fc1w.clone());
            let fc1b = tape.constant(refs.fc1b.clone());
            let fc2w = tape.constant(refs.fc2w.clone());
            let fc2b = tape.constant(refs.fc2b.clone());
            let hdn = tape.linear(xn, fc1w, fc1b);
            let hdn = tape.gelu(hdn);
            let mlp = tape.linear(hdn, fc2w, fc2b);
            z = tape.add(x, mlp);
        }
        z
    }

    /// Convenience evaluation wrapper around [`observe_on_tape`].
    ///
    /// `replicas` is [q, d_p] (normally q copies of the input class token),
    /// `bias` is [H, q, n_p]. Returns the refined tokens [q, d_p].
    pub fn observe_class_tokens(
        &self,
        output: &BackboneOutput,
        replicas: &Tensor,
        bias: &Tensor,
    ) -> Result<Tensor> {
        let q = match replicas.shape() {
            [q, d] if *d == self.config.embed_dim => *q,
            _ => {
                return Err(Error::Shape(format!(
                    "replicas must be [q, {}], got {:?}",
                    self.config.embed_dim,
                    replicas.shape()
                )))
            }
        };
        if q == 0 {
            return Err(Error::Validation("observer needs at least one replica".into()));
        }
        let expect = [self.config.num_heads, q, self.config.num_patches()];
        if bias.shape() != expect {
            return Err(Error::Shape(format!(
                "bias must be {expect:?}, got {:?}",
                bias.shape()
            )));
        }
        if !bias.is_finite() {
            return Err(Error::Validation("bias contains non-finite values".into()));
        }
        let cache = self.observer_cache(output);
        let mut tape = Tape::new();
        let reps = tape.constant(replicas.clone());
        let bias_node =
            tape.constant(bias.reshaped(vec![self.config.num_heads * q, self.config.num_patches()]));
        let out = self.observe_on_tape(&mut tape, &cache, reps, Some(bias_node));
        Ok(tape.value(out).clone())
    }

    // ── text path ────────────────────────────────────────────────────────

    /// Tokenize a prompt template into ids plus frozen token embeddings.
    pub fn tokenize_prompt(&self, template: &str, class_tag: ClassTag) -> Result<TextPromptEmbedding> {
        let ids = self.tokenizer.encode(template, self.config.text_len_max)?;
        let id_token = self.tokenizer.id_token();
        let positions: Vec<usize> =
            ids.iter().enumerate().filter(|(_, &t)| t == id_token).map(|(i, _)| i).collect();
        if positions.len() != 1 {
            return Err(Error::Validation(format!(
                "prompt must contain exactly one {ID_PLACEHOLDER} placeholder, found {}",
                positions.len()
            )));
        }
        let embed = self.params.get("text.embed");
        let dt = self.config.text_token_dim;
        let mut token_embeddings = Tensor::zeros(&[ids.len(), dt]);
        for (i, &t) in ids.iter().enumerate() {
            token_embeddings.data_mut()[i * dt..(i + 1) * dt]
                .copy_from_slice(&embed.data()[t as usize * dt..(t as usize + 1) * dt]);
        }
        Ok(TextPromptEmbedding {
            token_ids: ids,
            token_embeddings,
            id_position: positions[0],
            class_tag,
        })
    }

    /// Text encoding with the embedding at the placeholder position replaced
    /// by `id_embedding` [1, d_tk]. Tape version; gradients flow through the
    /// substituted row only (all text weights are frozen constants).
    pub fn encode_text_on_tape(
        &self,
        tape: &mut Tape,
        prompt: &TextPromptEmbedding,
        id_embedding: NodeId,
    ) -> Result<NodeId> {
        let n = prompt.token_ids.len();
        let tau = prompt.id_position;
        if tau >= n {
            return Err(Error::Validation(format!("id position {tau} out of range {n}")));
        }
        if tape.value(id_embedding).shape() != [1, self.config.text_token_dim] {
            return Err(Error::Shape(format!(
                "id embedding must be [1, {}], got {:?}",
                self.config.text_token_dim,
                tape.value(id_embedding).shape()
            )));
        }

        let base = tape.constant(prompt.token_embeddings.clone());
        let mut parts = Vec::new();
        if tau > 0 {
            parts.push(tape.slice_rows(base, 0, tau));
        }
        parts.push(id_embedding);
        if tau + 1 < n {
            parts.push(tape.slice_rows(base, tau + 1, n - tau - 1));
        }
        let embedded = tape.concat_rows(&parts);

        let pos = slice_rows_plain(self.params.get("text.pos"), 0, n);
        let pos = tape.constant(pos);
        let mut x = tape.add(embedded, pos);

        let causal = tape.constant(causal_mask(n));
        for l in 0..TEXT_BLOCKS {
            let w = crate::nn::BlockNodes::constants(tape, &self.params, &format!("text.block{l}"));
            x = crate::nn::transformer_block(tape, x, &w, TEXT_HEADS, Some(causal));
        }

        let lng = tape.constant(self.params.get("text.ln_final.g").clone());
        let lnb = tape.constant(self.params.get("text.ln_final.b").clone());
        let x = tape.layer_norm(x, lng, lnb, LN_EPS);
        let last = tape.slice_rows(x, n - 1, 1);
        let proj = tape.constant(self.params.get("text.proj").clone());
        let feat = tape.matmul(last, proj);
        Ok(tape.l2_normalize_vec(feat))
    }

    /// ID-aware text feature F_c as a plain tensor, shape [1, d_t].
    pub fn encode_text_with_substitution(
        &self,
        prompt: &TextPromptEmbedding,
        id_embedding: &Tensor,
    ) -> Result<Tensor> {
        if !id_embedding.is_finite() {
            return Err(Error::Validation("id embedding contains non-finite values".into()));
        }
        let mut tape = Tape::new();
        let id_node = tape.constant(id_embedding.reshaped(vec![1, self.config.text_token_dim]));
        let out = self.encode_text_on_tape(&mut tape, prompt, id_node)?;
        Ok(tape.value(out).clone())
    }

    /// Plain prompt encoding with the literal placeholder embedding retained.
    pub fn encode_text_plain(&self, prompt: &TextPromptEmbedding) -> Result<Tensor> {
        let tau = prompt.id_position;
        let dt = self.config.text_token_dim;
        let row = Tensor::new(
            vec![1, dt],
            prompt.token_embeddings.data()[tau * dt..(tau + 1) * dt].to_vec(),
        );
        self.encode_text_with_substitution(prompt, &row)
    }

    // ── persistence ──────────────────────────────────────────────────────

    /// Write config plus every frozen tensor into a checkpoint container.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let header = serde_json::to_value(&self.config).expect("config serializes");
        let mut container = Container::new("backbone", header);
        for (name, t) in self.params.iter() {
            container.add(name, t.clone());
        }
        container.write(path)
    }

    /// Load-external-weights hook: rebuild a backbone from a checkpoint
    /// container (e.g. converted CLIP-format weights). Tensor names and
    /// shapes must match this implementation's layout exactly.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let container = Container::read(path)?;
        if container.kind != "backbone" {
            return Err(Error::Checkpoint(format!(
                "expected a backbone container, got {}",
                container.kind
            )));
        }
        let config: BackboneConfig = serde_json::from_value(container.header.clone())
            .map_err(|e| Error::Checkpoint(format!("bad backbone header: {e}")))?;
        config.validate()?;
        let reference = Backbone::new(config.clone(), 0)?;
        let mut params = ParamStore::new();
        for name in reference.params.names() {
            let t = container.get(name)?;
            let want = reference.params.get(name).shape();
            if t.shape() != want {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: expected shape {want:?}, got {:?}",
                    t.shape()
                )));
            }
            params.insert(name, t.clone());
        }
        Ok(Backbone { config, params, tokenizer: Tokenizer::new() })
    }

    #[cfg(test)]
    pub(crate) fn verify_roundtrip(&self, other: &Backbone) -> bool {
        self.checksum() == other.checksum()
    }
}

fn insert_block(params: &mut ParamStore, prefix: &str, d: usize, rng: &mut ChaCha20Rng) {
    crate::nn::init_block_params(params, prefix, d, d * MLP_RATIO, rng);
}

/// Random frozen patch-projection bank. Two thirds of the output dimensions
/// use zero-mean spatial filters, which expose local texture and edge
/// statistics to linear probes the way a pretrained early vision stack does;
/// the rest keep the raw projection so color and brightness stay readable.
fn random_filter_bank(patch_in: usize, d: usize, patch: usize, rng: &mut ChaCha20Rng) -> Tensor {
    let mut w = Tensor::zeros(&[patch_in, d]);
    for j in 0..d {
        let mut col = Tensor::randn(&[patch_in], 1.0, rng).into_data();
        if j % 3 != 0 {
            // Remove each channel's spatial mean: a zero-DC filter.
            for c in 0..3 {
                let mean: f64 =
                    (0..patch * patch).map(|p| col[p * 3 + c]).sum::<f64>() / (patch * patch) as f64;
                for p in 0..patch * patch {
                    col[p * 3 + c] -= mean;
                }
            }
        }
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for (i, v) in col.iter().enumerate() {
            w.data_mut()[i * d + j] = v / norm;
        }
    }
    w
}

/// Plain (off-tape) pre-LN transformer block over [T, d] tokens.
fn block_forward(x: &Tensor, refs: &BlockRefs<'_>, heads: usize, causal: bool) -> Tensor {
    let (t, d) = x.dims2();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let xn = layer_norm_rows(x, refs.ln1g, refs.ln1b, LN_EPS);
    let q = xn.matmul(refs.wq).add(&broadcast_rows(refs.bq, t));
    let k = xn.matmul(refs.wk).add(&broadcast_rows(refs.bk, t));
    let v = xn.matmul(refs.wv).add(&broadcast_rows(refs.bv, t));
    let mask = causal.then(|| causal_mask(t));
    let mut heads_out = Vec::with_capacity(heads);
    for i in 0..heads {
        let q_i = slice_cols_plain(&q, i * dh, dh);
        let k_i = slice_cols_plain(&k, i * dh, dh);
        let v_i = slice_cols_plain(&v, i * dh, dh);
        let mut logits = q_i.matmul(&k_i.transposed()).scale(scale);
        if let Some(m) = &mask {
            logits = logits.add(m);
        }
        let attn = softmax_rows(&logits);
        heads_out.push(attn.matmul(&v_i));
    }
    let cat = concat_cols_plain(&heads_out);
    let attn_out = cat.matmul(refs.wo).add(&broadcast_rows(refs.bo, t));
    let x = x.add(&attn_out);
    let xn2 = layer_norm_rows(&x, refs.ln2g, refs.ln2b, LN_EPS);
    let h = xn2.matmul(refs.fc1w).add(&broadcast_rows(refs.fc1b, t)).map(crate::tensor::gelu);
    let mlp = h.matmul(refs.fc2w).add(&broadcast_rows(refs.fc2b, t));
    x.add(&mlp)
}

fn causal_mask(n: usize) -> Tensor {
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in (i + 1)..n {
            m.data_mut()[i * n + j] = -1e30;
        }
    }
    m
}

fn broadcast_rows(bias: &Tensor, rows: usize) -> Tensor {
    let n = bias.numel();
    let mut out = Tensor::zeros(&[rows, n]);
    for i in 0..rows {
        out.data_mut()[i * n..(i + 1) * n].copy_from_slice(bias.data());
    }
    out
}

fn stack_rows(a: &Tensor, b: &Tensor) -> Tensor {
    let (ma, n) = a.dims2();
    let (mb, nb) = b.dims2();
    assert_eq!(n, nb);
    let mut data = Vec::with_capacity((ma + mb) * n);
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(vec![ma + mb, n], data)
}

fn slice_rows_plain(x: &Tensor, start: usize, len: usize) -> Tensor {
    let (_, n) = x.dims2();
    Tensor::new(vec![len, n], x.data()[start * n..(start + len) * n].to_vec())
}

fn slice_cols_plain(x: &Tensor, start: usize, len: usize) -> Tensor {
    let (m, n) = x.dims2();
    let mut out = Tensor::zeros(&[m, len]);
    for i in 0..m {
        out.data_mut()[i * len..(i + 1) * len]
            .copy_from_slice(&x.data()[i * n + start..i * n + start + len]);
    }
    out
}

fn concat_cols_plain(parts: &[Tensor]) -> Tensor {
    let m = parts[0].dims2().0;
    let n: usize = parts.iter().map(|p| p.dims2().1).sum();
    let mut out = Tensor::zeros(&[m, n]);
    let mut off = 0;
    for p in parts {
        let w = p.dims2().1;
        for i in 0..m {
            out.data_mut()[i * n + off..i * n + off + w]
                .copy_from_slice(&p.data()[i * w..(i + 1) * w]);
        }
        off += w;
    }
    out
}

fn l2_normalize(x: &Tensor) -> Tensor {
    let norm = (x.data().iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt();
    x.scale(1.0 / norm)
}

pub use checkpoint::CONTAINER_VERSION;

#[cfg(test)]
mod tests;
