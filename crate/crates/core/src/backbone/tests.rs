use super::*;
use crate::tensor::gelu;

fn default_backbone() -> Backbone {
    Backbone::new(BackboneConfig::default(), 7).unwrap()
}

fn test_image(seed: u64, size: usize) -> Tensor {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Tensor::randn(&[size, size, 3], 1.0, &mut rng).map(|v| crate::tensor::sigmoid(v))
}

#[test]
fn encode_image_shapes_match_config() {
    let bb = default_backbone();
    let out = bb.encode_image(&test_image(1, 64)).unwrap();
    assert_eq!(out.class_tokens_per_block.len(), 5);
    assert_eq!(out.patch_tokens_per_block.len(), 5);
    for z in &out.class_tokens_per_block {
        assert_eq!(z.shape(), &[1, 64]);
    }
    for p in &out.patch_tokens_per_block {
        assert_eq!(p.shape(), &[8, 8, 64]);
    }
}

#[test]
fn encode_image_rejects_wrong_dims() {
    let bb = default_backbone();
    let err = bb.encode_image(&test_image(1, 32)).unwrap_err();
    assert!(matches!(err, Error::Shape(_)));
}

#[test]
fn frozen_encoding_is_bitwise_deterministic() {
    let bb = default_backbone();
    let img = test_image(2, 64);
    let a = bb.encode_image(&img).unwrap();
    let b = bb.encode_image(&img).unwrap();
    for (x, y) in a.class_tokens_per_block.iter().zip(&b.class_tokens_per_block) {
        assert_eq!(x.data(), y.data());
    }
    for (x, y) in a.patch_tokens_per_block.iter().zip(&b.patch_tokens_per_block) {
        assert_eq!(x.data(), y.data());
    }
}

#[test]
fn all_zero_image_stays_finite() {
    let bb = default_backbone();
    let out = bb.encode_image(&Tensor::zeros(&[64, 64, 3])).unwrap();
    assert!(out.is_finite());
    assert!(bb.image_features(&out).is_finite());
}

#[test]
fn zero_bias_single_replica_reproduces_native_class_token() {
    let bb = default_backbone();
    let out = bb.encode_image(&test_image(3, 64)).unwrap();
    let replicas = out.class_tokens_per_block[0].clone();
    let bias = Tensor::zeros(&[4, 1, 64]);
    let refined = bb.observe_class_tokens(&out, &replicas, &bias).unwrap();
    assert_eq!(refined.shape(), &[1, 64]);
    let diff = refined.max_abs_diff(out.final_class());
    assert!(diff < 1e-6, "zero-bias observer deviates by {diff}");
}

#[test]
fn nonzero_bias_breaks_equivalence() {
    let bb = default_backbone();
    let out = bb.encode_image(&test_image(3, 64)).unwrap();
    let replicas = out.class_tokens_per_block[0].clone();
    let mut bias = Tensor::zeros(&[4, 1, 64]);
    bias.data_mut()[5] = 1.0;
    let refined = bb.observe_class_tokens(&out, &replicas, &bias).unwrap();
    assert!(refined.max_abs_diff(out.final_class()) > 1e-9);
}

#[test]
fn observer_rejects_empty_replicas_and_bad_bias() {
    let bb = default_backbone();
    let out = bb.encode_image(&test_image(4, 64)).unwrap();
    let empty = Tensor::zeros(&[0, 64]);
    assert!(matches!(
        bb.observe_class_tokens(&out, &empty, &Tensor::zeros(&[4, 0, 64])),
        Err(Error::Validation(_))
    ));
    let replicas = out.class_tokens_per_block[0].clone();
    assert!(matches!(
        bb.observe_class_tokens(&out, &replicas, &Tensor::zeros(&[4, 1, 63])),
        Err(Error::Shape(_))
    ));
}

#[test]
fn permuting_replicas_permutes_outputs() {
    let bb = default_backbone();
    let out = bb.encode_image(&test_image(5, 64)).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let reps = Tensor::randn(&[3, 64], 0.5, &mut rng);
    let mut bias = Tensor::zeros(&[4, 3, 64]);
    for (i, v) in bias.data_mut().iter_mut().enumerate() {
        *v = ((i % 13) as f64 - 6.0) * 0.05;
    }
    let fwd = bb.observe_class_tokens(&out, &reps, &bias).unwrap();

    // Swap replicas 0 and 2, along with their per-head bias rows.
    let perm = [2usize, 1, 0];
    let mut reps_p = Tensor::zeros(&[3, 64]);
    for (dst, &src) in perm.iter().enumerate() {
        reps_p.data_mut()[dst * 64..(dst + 1) * 64]
            .copy_from_slice(&reps.data()[src * 64..(src + 1) * 64]);
    }
    let mut bias_p = Tensor::zeros(&[4, 3, 64]);
    for h in 0..4 {
        for (dst, &src) in perm.iter().enumerate() {
            let to = (h * 3 + dst) * 64;
            let from = (h * 3 + src) * 64;
            bias_p.data_mut()[to..to + 64].copy_from_slice(&bias.data()[from..from + 64]);
        }
    }
    let fwd_p = bb.observe_class_tokens(&out, &reps_p, &bias_p).unwrap();
    for (dst, &src) in perm.iter().enumerate() {
        let a = &fwd_p.data()[dst * 64..(dst + 1) * 64];
        let b = &fwd.data()[src * 64..(src + 1) * 64];
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn saturated_bias_collapses_attention_onto_one_patch() {
    // With +1e9 bias on one patch position in every head, each head's
    // softmax becomes one-hot there, so the attention output row is exactly
    // that patch's value projection pushed through the output projection.
    let config = BackboneConfig { num_blocks: 1, ..BackboneConfig::default() };
    let bb = Backbone::new(config, 9).unwrap();
    let out = bb.encode_image(&test_image(6, 64)).unwrap();
    let cache = bb.observer_cache(&out);
    let replica = out.class_tokens_per_block[0].clone();
    let pos = 23usize;
    let mut bias = Tensor::zeros(&[4, 1, 64]);
    for h in 0..4 {
        bias.data_mut()[h * 64 + pos] = 1e9;
    }
    let refined = bb.observe_class_tokens(&out, &replica, &bias).unwrap();

    // Manual single-key oracle for the one block.
    let refs = bb.block("vis.block0");
    let (_, v_p) = &cache.per_block[0];
    let value_row = Tensor::new(vec![1, 64], v_p.data()[pos * 64..(pos + 1) * 64].to_vec());
    let attn_out = value_row.matmul(refs.wo).add(&refs.bo.reshaped(vec![1, 64]));
    let x = replica.add(&attn_out);
    let xn = layer_norm_rows(&x, refs.ln2g, refs.ln2b, LN_EPS);
    let hidden = xn.matmul(refs.fc1w).add(&refs.fc1b.reshaped(vec![1, 256])).map(gelu);
    let expect = x.add(&hidden.matmul(refs.fc2w).add(&refs.fc2b.reshaped(vec![1, 64])));
    let diff = refined.max_abs_diff(&expect);
    assert!(diff < 1e-4, "collapsed attention deviates from single-key oracle by {diff}");
}

#[test]
fn observer_gradient_wrt_bias_matches_finite_differences() {
    let config = BackboneConfig { num_blocks: 2, ..BackboneConfig::default() };
    let bb = Backbone::new(config, 13).unwrap();
    let out = bb.encode_image(&test_image(8, 64)).unwrap();
    let cache = bb.observer_cache(&out);
    let replicas = Tensor::new(
        vec![2, 64],
        [out.class_tokens_per_block[0].data(), out.class_tokens_per_block[0].data()].concat(),
    );
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let bias = Tensor::randn(&[4 * 2, 64], 0.1, &mut rng);

    let loss_of = |b: &Tensor| -> f64 {
        let mut tape = Tape::new();
        let reps = tape.constant(replicas.clone());
        let bn = tape.constant(b.clone());
        let o = bb.observe_on_tape(&mut tape, &cache, reps, Some(bn));
        let sq = tape.mul(o, o);
        let s = tape.sum_all(sq);
        tape.scalar_value(s)
    };

    let mut tape = Tape::new();
    let reps = tape.constant(replicas.clone());
    let bn = tape.leaf(bias.clone());
    let o = bb.observe_on_tape(&mut tape, &cache, reps, Some(bn));
    let sq = tape.mul(o, o);
    let s = tape.sum_all(sq);
    let grads = tape.backward(s);
    let analytic = grads.get(bn).unwrap();

    let mut rng = ChaCha20Rng::seed_from_u64(5);
    for _ in 0..20 {
        let idx = rand::Rng::gen_range(&mut rng, 0..bias.numel());
        let eps = 1e-5;
        let mut plus = bias.clone();
        plus.data_mut()[idx] += eps;
        let mut minus = bias.clone();
        minus.data_mut()[idx] -= eps;
        let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
        let a = analytic.data()[idx];
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        assert!(
            (a - numeric).abs() / denom < 1e-4,
            "bias grad {idx}: analytic {a} vs numeric {numeric}"
        );
    }
}

#[test]
fn substituting_placeholder_embedding_is_a_no_op() {
    let bb = default_backbone();
    let prompt = bb.tokenize_prompt("This is a real photo of <id> person.", ClassTag::Real).unwrap();
    let tau = prompt.id_position;
    let dt = 64;
    let placeholder_row = Tensor::new(
        vec![1, dt],
        prompt.token_embeddings.data()[tau * dt..(tau + 1) * dt].to_vec(),
    );
    let substituted = bb.encode_text_with_substitution(&prompt, &placeholder_row).unwrap();
    let plain = bb.encode_text_plain(&prompt).unwrap();
    assert_eq!(substituted.data(), plain.data());
}

#[test]
fn different_id_embeddings_produce_different_features() {
    let bb = default_backbone();
    let prompt = bb.tokenize_prompt("This is a fake photo of <id> person.", ClassTag::Fake).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(21);
    let a = Tensor::randn(&[1, 64], 1.0, &mut rng);
    let b = Tensor::randn(&[1, 64], 1.0, &mut rng);
    let fa = bb.encode_text_with_substitution(&prompt, &a).unwrap();
    let fb = bb.encode_text_with_substitution(&prompt, &b).unwrap();
    let cos: f64 = fa.data().iter().zip(fb.data()).map(|(x, y)| x * y).sum();
    assert!(cos < 1.0 - 1e-6, "features are degenerate: cos = {cos}");
}

#[test]
fn text_features_are_unit_norm() {
    let bb = default_backbone();
    let prompt = bb.tokenize_prompt("This is a real photo of <id> person.", ClassTag::Real).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let id = Tensor::randn(&[1, 64], 2.0, &mut rng);
    let f = bb.encode_text_with_substitution(&prompt, &id).unwrap();
    let norm: f64 = f.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-6);
}

#[test]
fn observer_leaves_patch_stream_untouched() {
    let bb = default_backbone();
    let img = test_image(10, 64);
    let before = bb.encode_image(&img).unwrap();
    let replicas = before.class_tokens_per_block[0].clone();
    let mut bias = Tensor::zeros(&[4, 1, 64]);
    bias.data_mut()[7] = 3.0;
    let _ = bb.observe_class_tokens(&before, &replicas, &bias).unwrap();
    let after = bb.encode_image(&img).unwrap();
    for (x, y) in before.patch_tokens_per_block.iter().zip(&after.patch_tokens_per_block) {
        assert_eq!(x.data(), y.data());
    }
    assert_eq!(before.final_class().data(), after.final_class().data());
}

#[test]
fn checkpoint_roundtrip_preserves_weights() {
    let bb = default_backbone();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("backbone.vlfg");
    bb.save(&path).unwrap();
    let loaded = Backbone::load(&path).unwrap();
    assert!(bb.verify_roundtrip(&loaded));
    let img = test_image(12, 64);
    let a = bb.encode_image(&img).unwrap();
    let b = loaded.encode_image(&img).unwrap();
    assert_eq!(a.final_class().data(), b.final_class().data());
}
