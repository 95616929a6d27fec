use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::ops;

fn small_config(scheme: NormScheme) -> ModelConfig {
    ModelConfig {
        n_layers: 4,
        d_model: 16,
        n_q_heads: 4,
        n_kv_heads: 2,
        ffn_inner: 24,
        vocab_size: 32,
        norm_scheme: scheme,
        max_seq_len: 64,
        ..ModelConfig::toy()
    }
}

#[test]
fn dssn_post_gamma_is_depth_scaled() {
    let m = Model::build(small_config(NormScheme::Dssn), 1).unwrap();
    let expected_attn = 0.283 / 2.0;
    let expected_mlp = 0.432 / 2.0;
    for b in &m.blocks {
        assert!(b
            .gamma_post_attn
            .as_ref()
            .unwrap()
            .data()
            .iter()
            .all(|g| *g == expected_attn));
        assert!(b
            .gamma_post_mlp
            .as_ref()
            .unwrap()
            .data()
            .iter()
            .all(|g| *g == expected_mlp));
        assert!(b.gamma_pre_attn.data().iter().all(|g| *g == 1.0));
        assert!(b.gamma_pre_mlp.data().iter().all(|g| *g == 1.0));
    }
    assert!((expected_attn - 0.1415).abs() < 1e-12);
}

#[test]
fn sandwich_omits_depth_factor_and_pre_ln_has_no_post_norms() {
    let s = Model::build(small_config(NormScheme::Sandwich), 1).unwrap();
    assert!(s.blocks[0]
        .gamma_post_attn
        .as_ref()
        .unwrap()
        .data()
        .iter()
        .all(|g| *g == 0.283));
    let p = Model::build(small_config(NormScheme::PreLn), 1).unwrap();
    assert!(p
        .blocks
        .iter()
        .all(|b| b.gamma_post_attn.is_none() && b.gamma_post_mlp.is_none()));
    assert!(p.named_params().iter().all(|(n, _)| !n.contains("post")));
}

#[test]
fn same_seed_same_weights() {
    let a = Model::build(small_config(NormScheme::Dssn), 7).unwrap();
    let b = Model::build(small_config(NormScheme::Dssn), 7).unwrap();
    assert_eq!(a, b);
    let c = Model::build(small_config(NormScheme::Dssn), 8).unwrap();
    assert_ne!(a.embed, c.embed);
}

#[test]
fn zero_post_gamma_block_is_identity() {
    let cfg = small_config(NormScheme::Dssn);
    let mut m = Model::build(cfg.clone(), 3).unwrap();
    let block = &mut m.blocks[0];
    block.gamma_post_attn = Some(Tensor::zeros(&[16]));
    block.gamma_post_mlp = Some(Tensor::zeros(&[16]));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let h = Tensor::randn(&[5, 16], 1.0, &mut rng);
    let mask = CompressedMask::new(vec![2, 3]).unwrap();
    let out = dssn_block_forward(&h, &m.blocks[0], &cfg, &mask).unwrap();
    assert_eq!(out, h);
}

#[test]
fn residual_with_stubbed_branch() {
    // d = 2, branch returns c = [3, 4] (rms sqrt(12.5)), post gamma g = 0.5
    let mut tape = Tape::new();
    let h = tape.constant(Tensor::from_vec(vec![1.0, -1.0]));
    let c = tape.constant(Tensor::from_vec(vec![3.0, 4.0]));
    let g = tape.constant(Tensor::full(&[2], 0.5));
    let out = residual_branch(&mut tape, h, c, Some(g), 0.0).unwrap();
    let rms = 12.5f64.sqrt();
    let expected = [1.0 + 0.5 * 3.0 / rms, -1.0 + 0.5 * 4.0 / rms];
    for (a, b) in tape.value(out).data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn pre_ln_and_sandwich_agree_for_unit_rms_branch() {
    let mut tape = Tape::new();
    let h = tape.constant(Tensor::from_vec(vec![0.2, 0.7, -0.1, 2.0]));
    // rms([1,-1,1,-1]) = 1
    let c = tape.constant(Tensor::from_vec(vec![1.0, -1.0, 1.0, -1.0]));
    let g = tape.constant(Tensor::ones(&[4]));
    let dssn = residual_branch(&mut tape, h, c, Some(g), 0.0).unwrap();
    let pre = residual_branch(&mut tape, h, c, None, 0.0).unwrap();
    assert_eq!(tape.value(dssn), tape.value(pre));
}

#[test]
fn zero_post_gamma_everywhere_reduces_to_embedding_path() {
    let cfg = small_config(NormScheme::Dssn);
    let mut m = Model::build(cfg.clone(), 5).unwrap();
    for b in &mut m.blocks {
        b.gamma_post_attn = Some(Tensor::zeros(&[16]));
        b.gamma_post_mlp = Some(Tensor::zeros(&[16]));
    }
    let tokens = [3, 1, 4, 1, 5, 9];
    let mask = CompressedMask::single(6).unwrap();
    let logits = m.logits(&tokens, &mask).unwrap();
    let e = ops::embedding_lookup(&m.embed, &tokens).unwrap();
    let n = ops::rmsnorm(&e, &m.final_norm, cfg.norm_eps).unwrap();
    let expected = ops::matmul(&n, &m.lm_head).unwrap();
    assert_eq!(logits, expected);
}

#[test]
fn forward_is_bit_deterministic() {
    let m = Model::build(small_config(NormScheme::Dssn), 11).unwrap();
    let tokens: Vec<usize> = (0..12).map(|i| (i * 7) % 32).collect();
    let mask = CompressedMask::new(vec![5, 7]).unwrap();
    assert_eq!(
        m.logits(&tokens, &mask).unwrap(),
        m.logits(&tokens, &mask).unwrap()
    );
}

#[test]
fn tiny_init_empirical_std() {
    let std = init_std(InitScheme::TinyInit, 12288, 94).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let w = Tensor::randn(&[1024, 1024], std, &mut rng);
    let n = w.len() as f64;
    let mean = w.sum() / n;
    let var = w
        .data()
        .iter()
        .map(|x| (x - mean) * (x - mean))
        .sum::<f64>()
        / n;
    assert!((var.sqrt() / std - 1.0).abs() < 0.02);
}

#[test]
fn gqa_head_permutation_within_group_is_symmetric() {
    let cfg = ModelConfig {
        n_layers: 1,
        d_model: 32,
        n_q_heads: 4,
        n_kv_heads: 2,
        ffn_inner: 48,
        vocab_size: 16,
        max_seq_len: 16,
        ..ModelConfig::toy()
    };
    let m = Model::build(cfg.clone(), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = Tensor::randn(&[6, 32], 1.0, &mut rng);
    let mask = CompressedMask::new(vec![4, 2]).unwrap();
    let base = dssn_block_forward(&h, &m.blocks[0], &cfg, &mask).unwrap();

    // heads 0 and 1 share kv head 0; swap them in wq columns and wo rows
    let hd = cfg.head_dim();
    let mut b = m.blocks[0].clone();
    let d = cfg.d_model;
    for r in 0..d {
        for c in 0..hd {
            b.wq.data_mut().swap(r * d + c, r * d + hd + c);
        }
    }
    for c in 0..hd {
        for col in 0..d {
            b.wo.data_mut().swap(c * d + col, (hd + c) * d + col);
        }
    }
    let permuted = dssn_block_forward(&h, &b, &cfg, &mask).unwrap();
    assert!(base.max_abs_diff(&permuted) < 1e-12);
}

#[test]
fn context_limit_and_mask_mismatch() {
    let m = Model::build(small_config(NormScheme::PreLn), 1).unwrap();
    let long: Vec<usize> = vec![1; 65];
    assert!(m
        .logits(&long, &CompressedMask::single(65).unwrap())
        .is_err());
    assert!(m
        .logits(&[1, 2, 3], &CompressedMask::single(2).unwrap())
        .is_err());
}

#[test]
fn checkpoint_round_trip() {
    let m = Model::build(small_config(NormScheme::Dssn), 21).unwrap();
    let text = checkpoint::to_json(&m).unwrap();
    let back = checkpoint::from_json(&text).unwrap();
    assert_eq!(m, back);
    let bad = text.replace("trainlab-checkpoint", "other");
    assert!(checkpoint::from_json(&bad).is_err());
}

#[test]
fn loss_grads_follow_param_order() {
    let m = Model::build(small_config(NormScheme::Dssn), 4).unwrap();
    let tokens = [1, 2, 3, 4, 5];
    let targets = [Some(2), Some(3), Some(4), Some(5), None];
    let (loss, grads) = m
        .loss_and_grads(&tokens, &targets, &CompressedMask::single(5).unwrap())
        .unwrap();
    assert!(loss.is_finite());
    let named = m.named_params();
    assert_eq!(grads.len(), named.len());
    for (g, (_, t)) in grads.iter().zip(named) {
        assert_eq!(g.shape(), t.shape());
    }
}
