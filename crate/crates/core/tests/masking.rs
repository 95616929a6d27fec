use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trainlab::mask::{
    expand_mask, expand_mask_with, extract_seq_lens, masked_attention, BoolMask, CompressedMask,
    DocumentPackedBatch, MaskTemplate,
};
use trainlab::tensor::Tensor;

const EOD: usize = 0;

/// Mask built straight from eod positions: a token's document id is the number
/// of eod tokens strictly before it.
fn brute_force_mask(tokens: &[usize]) -> BoolMask {
    let mut doc = Vec::with_capacity(tokens.len());
    let mut seen = 0;
    for &t in tokens {
        doc.push(seen);
        if t == EOD {
            seen += 1;
        }
    }
    let mut m = BoolMask::new(tokens.len());
    for q in 0..tokens.len() {
        for k in 0..=q {
            m.set(q, k, doc[q] == doc[k]);
        }
    }
    m
}

/// Plain causal attention over one document, `[len, heads, hd]`.
fn causal_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    len: usize,
    heads: usize,
    hd: usize,
) -> Vec<f64> {
    let w = heads * hd;
    let mut out = vec![0.0; len * w];
    for h in 0..heads {
        for i in 0..len {
            let scores: Vec<f64> = (0..=i)
                .map(|j| {
                    (0..hd)
                        .map(|c| q[i * w + h * hd + c] * k[j * w + h * hd + c])
                        .sum::<f64>()
                        / (hd as f64).sqrt()
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..=i {
                for c in 0..hd {
                    out[i * w + h * hd + c] += e[j] / z * v[j * w + h * hd + c];
                }
            }
        }
    }
    out
}

fn per_document_oracle(q: &Tensor, k: &Tensor, v: &Tensor, lens: &[usize]) -> Vec<f64> {
    let (heads, hd) = (q.shape()[1], q.shape()[2]);
    let w = heads * hd;
    let mut out = Vec::new();
    let mut s = 0;
    for &l in lens {
        let r = s * w..(s + l) * w;
        out.extend(causal_attention(
            &q.data()[r.clone()],
            &k.data()[r.clone()],
            &v.data()[r],
            l,
            heads,
            hd,
        ));
        s += l;
    }
    out
}

#[test]
fn expand_of_extract_matches_brute_force_on_1000_streams() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let template = MaskTemplate::new(64).unwrap();
    for _ in 0..1000 {
        let t = rng.random_range(1..=512);
        let p_eod = rng.random_range(0.0..0.2);
        let tokens: Vec<usize> = (0..t)
            .map(|_| {
                if rng.random_bool(p_eod) {
                    EOD
                } else {
                    rng.random_range(1..100)
                }
            })
            .collect();
        let compressed = extract_seq_lens(&DocumentPackedBatch::new(tokens.clone(), EOD)).unwrap();
        assert_eq!(compressed.total(), t);
        let expanded = expand_mask_with(&compressed, &template, 1024).unwrap();
        assert_eq!(expanded, brute_force_mask(&tokens));
    }
}

#[test]
fn masked_attention_matches_per_document_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let n_docs = rng.random_range(1..5);
        let lens: Vec<usize> = (0..n_docs).map(|_| rng.random_range(1..9)).collect();
        let t: usize = lens.iter().sum();
        let heads = rng.random_range(1..4);
        let hd = 2 * rng.random_range(1..4);
        let q = Tensor::randn(&[t, heads, hd], 1.0, &mut rng);
        let k = Tensor::randn(&[t, heads, hd], 1.0, &mut rng);
        let v = Tensor::randn(&[t, heads, hd], 1.0, &mut rng);
        let mask = CompressedMask::new(lens.clone()).unwrap();
        let got = masked_attention(&q, &k, &v, &mask).unwrap();
        let want = per_document_oracle(&q, &k, &v, &lens);
        let diff = got
            .data()
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-6, "{lens:?}: {diff}");
        assert!(got.data().iter().all(|x| x.is_finite()));
    }
}

#[test]
fn single_document_is_plain_causal_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let q = Tensor::randn(&[6, 2, 4], 1.0, &mut rng);
    let k = Tensor::randn(&[6, 2, 4], 1.0, &mut rng);
    let v = Tensor::randn(&[6, 2, 4], 1.0, &mut rng);
    let got = masked_attention(&q, &k, &v, &CompressedMask::single(6).unwrap()).unwrap();
    let want = causal_attention(q.data(), k.data(), v.data(), 6, 2, 4);
    let diff = got
        .data()
        .iter()
        .zip(&want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-12);
}

#[test]
fn swapping_equal_length_documents_swaps_output_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (len, heads, hd) = (4, 2, 4);
    let w = heads * hd;
    let mk = |rng: &mut ChaCha8Rng| Tensor::randn(&[2 * len, heads, hd], 1.0, rng);
    let (q, k, v) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
    let swap = |t: &Tensor| {
        let mut d = t.data()[len * w..].to_vec();
        d.extend_from_slice(&t.data()[..len * w]);
        Tensor::new(t.shape().to_vec(), d).unwrap()
    };
    let mask = CompressedMask::new(vec![len, len]).unwrap();
    let out = masked_attention(&q, &k, &v, &mask).unwrap();
    let out_swapped = masked_attention(&swap(&q), &swap(&k), &swap(&v), &mask).unwrap();
    assert_eq!(swap(&out), out_swapped);
}

#[test]
fn fused_tape_attention_agrees_with_dense_masking() {
    use trainlab::tensor::ops::AttnShape;
    use trainlab::tensor::Tape;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let lens = vec![3, 5, 1, 4];
    let t: usize = lens.iter().sum();
    let (hq, hkv, hd) = (4, 2, 4);
    let q = Tensor::randn(&[t, hq, hd], 1.0, &mut rng);
    let k = Tensor::randn(&[t, hkv, hd], 1.0, &mut rng);
    let v = Tensor::randn(&[t, hkv, hd], 1.0, &mut rng);
    let mask = CompressedMask::new(lens.clone()).unwrap();
    let dense = masked_attention(&q, &k, &v, &mask).unwrap();
    let mut tape = Tape::new();
    let flat = |x: &Tensor| x.clone().reshape(&[t, x.shape()[1] * hd]).unwrap();
    let (qv, kv, vv) = (
        tape.constant(flat(&q)),
        tape.constant(flat(&k)),
        tape.constant(flat(&v)),
    );
    let a = tape
        .attention(
            qv,
            kv,
            vv,
            &lens,
            AttnShape {
                q_heads: hq,
                kv_heads: hkv,
                head_dim: hd,
            },
        )
        .unwrap();
    let fused = tape.value(a).clone().reshape(&[t, hq, hd]).unwrap();
    assert!(fused.max_abs_diff(&dense) < 1e-12);
}

#[test]
fn default_template_expansion() {
    let m = expand_mask(&CompressedMask::new(vec![2100, 30]).unwrap()).unwrap();
    assert!(m.get(2099, 0) && m.get(2099, 2099) && !m.get(2099, 2100 - 1 + 1));
    assert!(!m.get(2100, 2099) && m.get(2129, 2100));
}

proptest! {
    #[test]
    fn compressed_lengths_sum_to_stream_length(tokens in prop::collection::vec(0usize..5, 1..200)) {
        let m = extract_seq_lens(&DocumentPackedBatch::new(tokens.clone(), EOD)).unwrap();
        prop_assert_eq!(m.total(), tokens.len());
        prop_assert!(m.seq_lens().iter().all(|&l| l >= 1));
        let eods = tokens.iter().filter(|&&t| t == EOD).count();
        let trailing = usize::from(*tokens.last().unwrap() != EOD);
        prop_assert_eq!(m.num_docs(), eods + trailing);
    }

    #[test]
    fn first_token_of_each_document_attends_only_to_itself(lens in prop::collection::vec(1usize..20, 1..8)) {
        let m = CompressedMask::new(lens).unwrap();
        let dense = expand_mask(&m).unwrap();
        for s in m.starts() {
            let row = dense.row(s);
            prop_assert_eq!(row.iter().filter(|b| **b).count(), 1);
            prop_assert!(row[s]);
        }
    }
}
