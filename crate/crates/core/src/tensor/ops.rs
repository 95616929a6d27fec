//! Forward kernels. Each kernel sums sequentially along the last axis so
//! repeated evaluations are bit-identical.

use super::{same_shape, Tensor};
use crate::error::{bail, Result};

/// `c = beta * c + op(a) * op(b)` for row-major `a: m x k`, `b: k x n`.
/// `trans_a` / `trans_b` read the stored matrix transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: strides describe in-bounds row-major views of slices whose
    // lengths were asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product treating every axis of `a` but the last as rows:
/// `[..., k] x [k, n] -> [..., n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if b.rank() != 2 {
        bail!(
            Dimension,
            "matmul: right operand must be 2-D, got {:?}",
            b.shape()
        );
    }
    if a.rank() == 0 {
        bail!(Dimension, "matmul: left operand is a scalar");
    }
    let k = a.last_dim();
    if b.shape()[0] != k {
        bail!(
            Dimension,
            "matmul: inner dimensions {:?} x {:?} differ",
            a.shape(),
            b.shape()
        );
    }
    let n = b.shape()[1];
    let m = a.rows();
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
    Tensor::new(shape, out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "mul")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub(crate) fn rmsnorm_with_inv(x: &Tensor, gamma: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>)> {
    let d = x.last_dim();
    if gamma.rank() != 1 || gamma.len() != d {
        bail!(
            Dimension,
            "rmsnorm: gamma {:?} does not match last dimension of {:?}",
            gamma.shape(),
            x.shape()
        );
    }
    if !(eps >= 0.0) {
        bail!(Argument, "rmsnorm: eps must be non-negative, got {eps}");
    }
    x.check_finite("rmsnorm input")?;
    let rows = x.rows();
    let mut out = vec![0.0; x.len()];
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let denom = (ms + eps).sqrt();
        if denom == 0.0 {
            bail!(
                Numeric,
                "rmsnorm: zero root-mean-square in row {r} with eps = 0"
            );
        }
        let ir = 1.0 / denom;
        for ((o, v), g) in out[r * d..(r + 1) * d]
            .iter_mut()
            .zip(row)
            .zip(gamma.data())
        {
            *o = g * v * ir;
        }
        inv.push(ir);
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, inv))
}

/// Root-mean-square normalization along the last axis:
/// `out[i] = gamma[i] * x[i] / sqrt(mean(x^2) + eps)`.
pub fn rmsnorm(x: &Tensor, gamma: &Tensor, eps: f64) -> Result<Tensor> {
    rmsnorm_with_inv(x, gamma, eps).map(|(t, _)| t)
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

/// `silu(gate) * up`, elementwise.
pub fn swiglu(gate: &Tensor, up: &Tensor) -> Result<Tensor> {
    same_shape(gate, up, "swiglu")?;
    let data = gate
        .data()
        .iter()
        .zip(up.data())
        .map(|(g, u)| silu(*g) * u)
        .collect();
    Tensor::new(gate.shape().to_vec(), data)
}

pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Softmax over the last axis after max-subtraction.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let d = x.last_dim();
    if d == 0 || x.rank() == 0 {
        bail!(Dimension, "softmax over an empty last dimension");
    }
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        softmax_row(src, dst);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Gathers rows of a `[vocab, d]` table.
pub fn embedding_lookup(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    if table.rank() != 2 {
        bail!(
            Dimension,
            "embedding table must be 2-D, got {:?}",
            table.shape()
        );
    }
    let (vocab, d) = (table.shape()[0], table.shape()[1]);
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= vocab {
            bail!(
                Argument,
                "token id {id} out of range for vocabulary of {vocab}"
            );
        }
        out.extend_from_slice(table.row(id));
    }
    Tensor::new(vec![ids.len(), d], out)
}

/// Rotation angle of pair `i` at `position`: `position * base^(-2i/head_dim)`.
pub fn rope_angle(position: usize, pair: usize, head_dim: usize, base: f64) -> f64 {
    position as f64 * base.powf(-2.0 * pair as f64 / head_dim as f64)
}

/// Rotates adjacent pairs `(2i, 2i+1)` of every head in place. `data` is laid
/// out `[rows, heads, head_dim]`; `inverse` rotates by the negated angle.
pub(crate) fn rope_rotate(
    data: &mut [f64],
    heads: usize,
    head_dim: usize,
    positions: &[usize],
    base: f64,
    inverse: bool,
) {
    let width = heads * head_dim;
    let half = head_dim / 2;
    let inv_freq: Vec<f64> = (0..half)
        .map(|i| base.powf(-2.0 * i as f64 / head_dim as f64))
        .collect();
    for (r, &pos) in positions.iter().enumerate() {
        let row = &mut data[r * width..(r + 1) * width];
        for (i, f) in inv_freq.iter().enumerate() {
            let angle = pos as f64 * f;
            let (s, c) = angle.sin_cos();
            let s = if inverse { -s } else { s };
            for h in 0..heads {
                let at = h * head_dim + 2 * i;
                let (x0, x1) = (row[at], row[at + 1]);
                row[at] = x0 * c - x1 * s;
                row[at + 1] = x0 * s + x1 * c;
            }
        }
    }
}

pub(crate) fn check_rope(head_dim: usize, base: f64) -> Result<()> {
    if head_dim == 0 || !head_dim.is_multiple_of(2) {
        bail!(
            Config,
            "rotary embedding needs an even head dimension, got {head_dim}"
        );
    }
    if !(base > 0.0 && base.is_finite()) {
        bail!(
            Config,
            "rotary base must be positive and finite, got {base}"
        );
    }
    Ok(())
}

/// Applies rotary position embedding to `x: [T, heads, head_dim]`.
pub fn rope_apply(x: &Tensor, positions: &[usize], base: f64) -> Result<Tensor> {
    if x.rank() != 3 {
        bail!(
            Dimension,
            "rope_apply expects [T, heads, head_dim], got {:?}",
            x.shape()
        );
    }
    let (t, heads, hd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    check_rope(hd, base)?;
    if positions.len() != t {
        bail!(Dimension, "{} positions for {t} rows", positions.len());
    }
    let mut out = x.clone();
    rope_rotate(out.data_mut(), heads, hd, positions, base, false);
    Ok(out)
}

/// Cached forward state of [`doc_causal_attention`].
#[derive(Debug, Clone)]
pub(crate) struct AttentionCache {
    /// Per head, concatenated lower triangles of every document's softmax.
    pub probs: Vec<f64>,
    pub per_head: usize,
}

/// Geometry of a grouped-query attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnShape {
    pub q_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

impl AttnShape {
    pub fn group(&self) -> usize {
        self.q_heads / self.kv_heads
    }
}

pub(crate) fn check_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    seq_lens: &[usize],
    shape: AttnShape,
) -> Result<usize> {
    let AttnShape {
        q_heads,
        kv_heads,
        head_dim,
    } = shape;
    if kv_heads == 0 || q_heads % kv_heads != 0 {
        bail!(
            Config,
            "{q_heads} query heads not divisible by {kv_heads} kv heads"
        );
    }
    let t = q.rows();
    if q.last_dim() != q_heads * head_dim
        || k.last_dim() != kv_heads * head_dim
        || v.last_dim() != kv_heads * head_dim
        || k.rows() != t
        || v.rows() != t
    {
        bail!(
            Dimension,
            "attention: q {:?}, k {:?}, v {:?} inconsistent with {shape:?}",
            q.shape(),
            k.shape(),
            v.shape()
        );
    }
    if seq_lens.contains(&0) {
        bail!(Argument, "attention: document of length 0 in {seq_lens:?}");
    }
    if seq_lens.iter().sum::<usize>() != t {
        bail!(
            Dimension,
            "attention: document lengths {seq_lens:?} do not sum to {t} rows"
        );
    }
    Ok(t)
}

/// Causal self-attention restricted to each document of a packed sequence.
/// `q: [T, q_heads*head_dim]`, `k, v: [T, kv_heads*head_dim]`; query head `h`
/// reads kv head `h / (q_heads / kv_heads)`. Logits are scaled by
/// `1/sqrt(head_dim)`.
pub(crate) fn doc_causal_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    seq_lens: &[usize],
    shape: AttnShape,
) -> Result<(Tensor, AttentionCache)> {
    let t = check_attention(q, k, v, seq_lens, shape)?;
    let AttnShape {
        q_heads,
        kv_heads,
        head_dim: hd,
    } = shape;
    let group = shape.group();
    let scale = 1.0 / (hd as f64).sqrt();
    let per_head: usize = seq_lens.iter().map(|l| l * (l + 1) / 2).sum();
    let mut probs = vec![0.0; per_head * q_heads];
    let mut out = vec![0.0; t * q_heads * hd];
    let (qw, kw) = (q_heads * hd, kv_heads * hd);
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut scores = Vec::new();
    for h in 0..q_heads {
        let g = h / group;
        let mut tri = h * per_head;
        let mut start = 0;
        for &len in seq_lens {
            for i in 0..len {
                let qi = &qd[(start + i) * qw + h * hd..][..hd];
                scores.clear();
                for j in 0..=i {
                    let kj = &kd[(start + j) * kw + g * hd..][..hd];
                    let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                    scores.push(dot * scale);
                }
                let p = &mut probs[tri..tri + i + 1];
                softmax_row(&scores, p);
                let o = &mut out[(start + i) * qw + h * hd..][..hd];
                for (j, pj) in p.iter().enumerate() {
                    let vj = &vd[(start + j) * kw + g * hd..][..hd];
                    for (oo, vv) in o.iter_mut().zip(vj) {
                        *oo += pj * vv;
                    }
                }
                tri += i + 1;
            }
            start += len;
        }
    }
    let mut out_shape = q.shape().to_vec();
    *out_shape.last_mut().unwrap() = qw;
    Ok((
        Tensor::new(out_shape, out)?,
        AttentionCache { probs, per_head },
    ))
}

/// Gradients of [`doc_causal_attention`] with respect to `q`, `k`, `v`.
pub(crate) fn doc_causal_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    seq_lens: &[usize],
    shape: AttnShape,
    cache: &AttentionCache,
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let AttnShape {
        q_heads,
        kv_heads,
        head_dim: hd,
    } = shape;
    let group = shape.group();
    let scale = 1.0 / (hd as f64).sqrt();
    let (qw, kw) = (q_heads * hd, kv_heads * hd);
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let (qd, kd, vd, dod) = (q.data(), k.data(), v.data(), dout.data());
    let mut dp = Vec::new();
    for h in 0..q_heads {
        let g = h / group;
        let mut tri = h * cache.per_head;
        let mut start = 0;
        for &len in seq_lens {
            for i in 0..len {
                let row = start + i;
                let p = &cache.probs[tri..tri + i + 1];
                let dor = &dod[row * qw + h * hd..][..hd];
                dp.clear();
                for j in 0..=i {
                    let vj = &vd[(start + j) * kw + g * hd..][..hd];
                    dp.push(dor.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>());
                }
                let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                let qi = &qd[row * qw + h * hd..][..hd];
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    let kr = (start + j) * kw + g * hd;
                    for c in 0..hd {
                        dq[row * qw + h * hd + c] += ds * kd[kr + c];
                        dk[kr + c] += ds * qi[c];
                        dv[kr + c] += p[j] * dor[c];
                    }
                }
                tri += i + 1;
            }
            start += len;
        }
    }
    (
        Tensor::new(q.shape().to_vec(), dq).unwrap(),
        Tensor::new(k.shape().to_vec(), dk).unwrap(),
        Tensor::new(v.shape().to_vec(), dv).unwrap(),
    )
}

/// Mean token cross-entropy of `logits: [n, vocab]` over rows with a target.
/// Returns the loss, the softmax probabilities, and the number of labelled rows.
pub(crate) fn cross_entropy(
    logits: &Tensor,
    targets: &[Option<usize>],
) -> Result<(f64, Tensor, usize)> {
    let v = logits.last_dim();
    if logits.rows() != targets.len() {
        bail!(
            Dimension,
            "cross_entropy: {} targets for {} rows",
            targets.len(),
            logits.rows()
        );
    }
    let probs = softmax_lastdim(logits)?;
    let mut total = 0.0;
    let mut count = 0;
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            if t >= v {
                bail!(Argument, "target {t} out of range for vocabulary of {v}");
            }
            let row = logits.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            count += 1;
        }
    }
    if count == 0 {
        bail!(Argument, "cross_entropy: no labelled rows");
    }
    Ok((total / count as f64, probs, count))
}
