//! Reset-attention-mask handling for document-packed sequences.
//!
//! A packed sequence is described by per-document lengths
//! ([`CompressedMask`]); the full `T x T` block-diagonal causal mask is only
//! materialised on request, by tiling a lower-triangular [`MaskTemplate`].
//!
//! Boundary convention: the end-of-document token belongs to the document it
//! terminates. It attends within that document and is attended to by the
//! later tokens of the same document only.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::ops::{self, AttnShape};
use crate::tensor::Tensor;

/// Default side of the causal template.
pub const DEFAULT_TEMPLATE_SIDE: usize = 2048;
/// Default cap on `T` for dense mask expansion.
pub const DEFAULT_MAX_EXPAND: usize = 8192;
/// Logit offset standing in for `-inf` on disallowed pairs.
pub const MASKED_LOGIT: f64 = -1e30;

/// Token stream in which `eod_id` closes each document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocumentPackedBatch {
    pub tokens: Vec<usize>,
    pub eod_id: usize,
}

impl DocumentPackedBatch {
    pub fn new(tokens: Vec<usize>, eod_id: usize) -> Self {
        Self { tokens, eod_id }
    }
}

/// Per-document lengths of a packed sequence. Serializes as a bare JSON array.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct CompressedMask {
    seq_lens: Vec<usize>,
}

impl TryFrom<Vec<usize>> for CompressedMask {
    type Error = crate::Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<CompressedMask> for Vec<usize> {
    fn from(m: CompressedMask) -> Self {
        m.seq_lens
    }
}

impl CompressedMask {
    pub fn new(seq_lens: Vec<usize>) -> Result<Self> {
        if seq_lens.is_empty() {
            bail!(Argument, "a packed sequence needs at least one document");
        }
        if let Some(i) = seq_lens.iter().position(|&l| l == 0) {
            bail!(Argument, "document {i} has length 0");
        }
        Ok(Self { seq_lens })
    }

    /// One document spanning all `t` positions.
    pub fn single(t: usize) -> Result<Self> {
        Self::new(vec![t])
    }

    pub fn seq_lens(&self) -> &[usize] {
        &self.seq_lens
    }

    pub fn total(&self) -> usize {
        self.seq_lens.iter().sum()
    }

    pub fn num_docs(&self) -> usize {
        self.seq_lens.len()
    }

    /// Start offset of every document.
    pub fn starts(&self) -> Vec<usize> {
        self.seq_lens
            .iter()
            .scan(0, |acc, &l| {
                let s = *acc;
                *acc += l;
                Some(s)
            })
            .collect()
    }

    /// Position of every token inside its own document.
    pub fn local_positions(&self) -> Vec<usize> {
        self.seq_lens.iter().flat_map(|&l| 0..l).collect()
    }

    /// Document index of every token.
    pub fn doc_ids(&self) -> Vec<usize> {
        self.seq_lens
            .iter()
            .enumerate()
            .flat_map(|(d, &l)| std::iter::repeat_n(d, l))
            .collect()
    }

    /// Number of stored integers; independent of `T`.
    pub fn footprint(&self) -> usize {
        self.seq_lens.len()
    }

    /// Number of attended `(query, key)` pairs: sum of `len * (len + 1) / 2`.
    pub fn attended_pairs(&self) -> u64 {
        self.seq_lens
            .iter()
            .map(|&l| (l as u64) * (l as u64 + 1) / 2)
            .sum()
    }
}

/// Splits after every end-of-document token; a trailing remainder without an
/// end-of-document token forms the last document.
pub fn extract_seq_lens(batch: &DocumentPackedBatch) -> Result<CompressedMask> {
    if batch.tokens.is_empty() {
        bail!(
            Argument,
            "cannot extract documents from an empty token stream"
        );
    }
    let mut lens = Vec::new();
    let mut current = 0;
    for &tok in &batch.tokens {
        current += 1;
        if tok == batch.eod_id {
            lens.push(current);
            current = 0;
        }
    }
    if current > 0 {
        lens.push(current);
    }
    CompressedMask::new(lens)
}

/// Dense boolean `T x T` mask, `get(q, k)` is true when query `q` may attend to key `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolMask {
    size: usize,
    bits: Vec<bool>,
}

impl BoolMask {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            bits: vec![false; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, q: usize, k: usize) -> bool {
        self.bits[q * self.size + k]
    }

    pub fn set(&mut self, q: usize, k: usize, v: bool) {
        self.bits[q * self.size + k] = v;
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.bits[q * self.size..(q + 1) * self.size]
    }

    pub fn count_allowed(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Rows rendered as `0`/`1` strings.
    pub fn to_strings(&self) -> Vec<String> {
        (0..self.size)
            .map(|q| {
                self.row(q)
                    .iter()
                    .map(|b| if *b { '1' } else { '0' })
                    .collect()
            })
            .collect()
    }
}

/// Lower-triangular causal template, `template[i][j] = (j <= i)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskTemplate {
    side: usize,
    bits: Vec<bool>,
}

impl Default for MaskTemplate {
    fn default() -> Self {
        Self::new(DEFAULT_TEMPLATE_SIDE).expect("default template side is positive")
    }
}

impl MaskTemplate {
    pub fn new(side: usize) -> Result<Self> {
        if side == 0 {
            bail!(Argument, "template side must be positive");
        }
        let mut bits = vec![false; side * side];
        for i in 0..side {
            for j in 0..=i {
                bits[i * side + j] = true;
            }
        }
        Ok(Self { side, bits })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.side + j]
    }

    /// Writes the causal block of a document occupying `[start, start + len)`.
    /// Diagonal tiles copy the template's top-left corner; tiles strictly
    /// below the diagonal are fully allowed.
    fn stamp(&self, out: &mut BoolMask, start: usize, len: usize) {
        let s = self.side;
        let tiles = len.div_ceil(s);
        for ti in 0..tiles {
            let rows = s.min(len - ti * s);
            for tj in 0..=ti {
                let cols = s.min(len - tj * s);
                for r in 0..rows {
                    let q = start + ti * s + r;
                    for c in 0..cols {
                        let k = start + tj * s + c;
                        let allowed = tj < ti || self.get(r, c);
                        out.set(q, k, allowed);
                    }
                }
            }
        }
    }
}

/// Expands to the block-diagonal causal mask using the default template and size cap.
pub fn expand_mask(mask: &CompressedMask) -> Result<BoolMask> {
    expand_mask_with(mask, &MaskTemplate::default(), DEFAULT_MAX_EXPAND)
}

/// Expands to the block-diagonal causal mask by tiling `template` over every
/// document. Fails when `T` exceeds `max_tokens`.
pub fn expand_mask_with(
    mask: &CompressedMask,
    template: &MaskTemplate,
    max_tokens: usize,
) -> Result<BoolMask> {
    let t = mask.total();
    if t > max_tokens {
        bail!(
            Resource,
            "dense mask of {t} x {t} exceeds the configured maximum of {max_tokens} tokens"
        );
    }
    let mut out = BoolMask::new(t);
    let mut start = 0;
    for &len in mask.seq_lens() {
        template.stamp(&mut out, start, len);
        start += len;
    }
    Ok(out)
}

/// Softmax attention over `q: [T, heads, hd]`, `k, v: [T, kv_heads, hd]` with
/// the dense mask expanded from `mask`. Disallowed logits receive
/// [`MASKED_LOGIT`] before the max-subtraction.
pub fn masked_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &CompressedMask,
) -> Result<Tensor> {
    if q.rank() != 3 || k.rank() != 3 || v.rank() != 3 {
        bail!(
            Dimension,
            "masked_attention expects [T, heads, head_dim] inputs, got {:?}, {:?}, {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        );
    }
    let shape = AttnShape {
        q_heads: q.shape()[1],
        kv_heads: k.shape()[1],
        head_dim: q.shape()[2],
    };
    if k.shape()[2] != shape.head_dim || v.shape() != k.shape() {
        bail!(
            Dimension,
            "masked_attention: k {:?} / v {:?} mismatch",
            k.shape(),
            v.shape()
        );
    }
    let t = q.shape()[0];
    let flat = |x: &Tensor| {
        x.clone()
            .reshape(&[x.shape()[0], x.shape()[1] * x.shape()[2]])
    };
    ops::check_attention(&flat(q)?, &flat(k)?, &flat(v)?, mask.seq_lens(), shape)?;
    let dense = expand_mask(mask)?;
    let hd = shape.head_dim;
    let group = shape.group();
    let scale = 1.0 / (hd as f64).sqrt();
    let (qw, kw) = (shape.q_heads * hd, shape.kv_heads * hd);
    let mut out = vec![0.0; t * qw];
    let mut logits = vec![0.0; t];
    let mut probs = vec![0.0; t];
    for h in 0..shape.q_heads {
        let g = h / group;
        for i in 0..t {
            let qi = &q.data()[i * qw + h * hd..][..hd];
            for (j, l) in logits.iter_mut().enumerate() {
                let kj = &k.data()[j * kw + g * hd..][..hd];
                let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                *l = if dense.get(i, j) { s } else { s + MASKED_LOGIT };
            }
            ops::softmax_row(&logits, &mut probs);
            let o = &mut out[i * qw + h * hd..][..hd];
            for (j, p) in probs.iter().enumerate() {
                let vj = &v.data()[j * kw + g * hd..][..hd];
                for (oo, vv) in o.iter_mut().zip(vj) {
                    *oo += p * vv;
                }
            }
        }
    }
    Tensor::new(q.shape().to_vec(), out)
}
