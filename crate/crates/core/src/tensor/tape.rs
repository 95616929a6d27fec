//! Reverse-mode differentiation over tensor-level operations.
//!
//! A [`Tape`] records every operation in creation order, which is already a
//! topological order; [`Tape::backward`] walks it once in reverse.
//! Parameters can be borrowed into the tape so a forward pass over a model
//! never copies its weights.

use super::ops::{self, AttentionCache, AttnShape};
use super::{same_shape, Tensor};
use crate::error::{bail, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    RmsNorm {
        x: Var,
        gamma: Var,
        inv_rms: Vec<f64>,
    },
    SwiGlu(Var, Var),
    Softmax(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Rope {
        x: Var,
        heads: usize,
        head_dim: usize,
        positions: Vec<usize>,
        base: f64,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq_lens: Vec<usize>,
        shape: AttnShape,
        cache: AttentionCache,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Tensor,
        count: usize,
    },
    Sum(Var),
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for one backward pass.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every leaf that requires them.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Moves a gradient out, leaving `None` behind.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Value<'a>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Borrowed trainable parameter.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(Value::Borrowed(t), Op::Leaf, true)
    }

    /// Owned trainable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Value::Owned(t), Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Value::Owned(t), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Value::Owned(out), Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Value::Owned(out), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_in_place(c);
        let rg = self.needs(&[a]);
        self.push(Value::Owned(out), Op::Scale(a, c), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Value::Owned(out), Op::MatMul(a, b), rg))
    }

    pub fn rmsnorm(&mut self, x: Var, gamma: Var, eps: f64) -> Result<Var> {
        let (out, inv_rms) = ops::rmsnorm_with_inv(self.value(x), self.value(gamma), eps)?;
        let rg = self.needs(&[x, gamma]);
        Ok(self.push(Value::Owned(out), Op::RmsNorm { x, gamma, inv_rms }, rg))
    }

    pub fn swiglu(&mut self, gate: Var, up: Var) -> Result<Var> {
        let out = ops::swiglu(self.value(gate), self.value(up))?;
        let rg = self.needs(&[gate, up]);
        Ok(self.push(Value::Owned(out), Op::SwiGlu(gate, up), rg))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax_lastdim(self.value(x))?;
        let rg = self.needs(&[x]);
        Ok(self.push(Value::Owned(out), Op::Softmax(x), rg))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = ops::embedding_lookup(self.value(table), ids)?;
        let rg = self.needs(&[table]);
        Ok(self.push(
            Value::Owned(out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Rotary embedding over `x: [T, heads * head_dim]`.
    pub fn rope(
        &mut self,
        x: Var,
        heads: usize,
        head_dim: usize,
        positions: &[usize],
        base: f64,
    ) -> Result<Var> {
        ops::check_rope(head_dim, base)?;
        let xv = self.value(x);
        if xv.last_dim() != heads * head_dim || xv.rows() != positions.len() {
            bail!(
                Dimension,
                "rope: {:?} vs {heads} heads x {head_dim} and {} positions",
                xv.shape(),
                positions.len()
            );
        }
        let mut out = xv.clone();
        ops::rope_rotate(out.data_mut(), heads, head_dim, positions, base, false);
        let rg = self.needs(&[x]);
        Ok(self.push(
            Value::Owned(out),
            Op::Rope {
                x,
                heads,
                head_dim,
                positions: positions.to_vec(),
                base,
            },
            rg,
        ))
    }

    /// Grouped-query causal attention confined to each document of the packed
    /// sequence described by `seq_lens`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq_lens: &[usize],
        shape: AttnShape,
    ) -> Result<Var> {
        let (out, cache) = ops::doc_causal_attention(
            self.value(q),
            self.value(k),
            self.value(v),
            seq_lens,
            shape,
        )?;
        let rg = self.needs(&[q, k, v]);
        Ok(self.push(
            Value::Owned(out),
            Op::Attention {
                q,
                k,
                v,
                seq_lens: seq_lens.to_vec(),
                shape,
                cache,
            },
            rg,
        ))
    }

    /// Mean cross-entropy over rows that carry a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (loss, probs, count) = ops::cross_entropy(self.value(logits), targets)?;
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Value::Owned(Tensor::scalar(loss)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.needs(&[x]);
        self.push(Value::Owned(Tensor::scalar(s)), Op::Sum(x), rg)
    }

    /// Propagates `d root / d root = 1` back to every leaf. `root` must hold a
    /// single value.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            bail!(
                Dimension,
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            );
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::new(self.value(root).shape().to_vec(), vec![1.0])?);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<'a>, g: Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*a) && self.rg(*b) {
                    accumulate(grads, *a, g.clone());
                    accumulate(grads, *b, g);
                } else if self.rg(*a) {
                    accumulate(grads, *a, g);
                } else {
                    accumulate(grads, *b, g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    accumulate(grads, *a, ops::mul(&g, bv).unwrap());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, ops::mul(&g, av).unwrap());
                }
            }
            Op::Scale(a, c) => {
                let mut g = g;
                g.scale_in_place(*c);
                accumulate(grads, *a, g);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.last_dim(), bv.shape()[1]);
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    ops::gemm(m, n, k, g.data(), false, bv.data(), true, &mut da, 0.0);
                    accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da).unwrap());
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    ops::gemm(k, m, n, av.data(), true, g.data(), false, &mut db, 0.0);
                    accumulate(grads, *b, Tensor::new(vec![k, n], db).unwrap());
                }
            }
            Op::RmsNorm { x, gamma, inv_rms } => {
                let (xv, gv) = (self.value(*x), self.value(*gamma));
                let d = xv.last_dim();
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; d];
                for (r, ir) in inv_rms.iter().enumerate() {
                    let xr = &xv.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let mut dot = 0.0;
                    for i in 0..d {
                        dgamma[i] += gr[i] * xr[i] * ir;
                        dot += gr[i] * gv.data()[i] * xr[i];
                    }
                    let c = ir * ir * ir * dot / d as f64;
                    for i in 0..d {
                        dx[r * d + i] = ir * gv.data()[i] * gr[i] - c * xr[i];
                    }
                }
                if self.rg(*x) {
                    accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
                }
                if self.rg(*gamma) {
                    accumulate(grads, *gamma, Tensor::new(vec![d], dgamma).unwrap());
                }
            }
            Op::SwiGlu(gate, up) => {
                let (gv, uv) = (self.value(*gate), self.value(*up));
                if self.rg(*gate) {
                    let d = g
                        .data()
                        .iter()
                        .zip(gv.data())
                        .zip(uv.data())
                        .map(|((dy, z), u)| {
                            let s = ops::sigmoid(*z);
                            dy * u * s * (1.0 + z * (1.0 - s))
                        })
                        .collect();
                    accumulate(grads, *gate, Tensor::new(gv.shape().to_vec(), d).unwrap());
                }
                if self.rg(*up) {
                    let d = g
                        .data()
                        .iter()
                        .zip(gv.data())
                        .map(|(dy, z)| dy * ops::silu(*z))
                        .collect();
                    accumulate(grads, *up, Tensor::new(uv.shape().to_vec(), d).unwrap());
                }
            }
            Op::Softmax(x) => {
                let p = node.value.get();
                let d = p.last_dim();
                let mut dx = vec![0.0; p.len()];
                for ((pr, gr), out) in p
                    .data()
                    .chunks(d)
                    .zip(g.data().chunks(d))
                    .zip(dx.chunks_mut(d))
                {
                    let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, pi), gi) in out.iter_mut().zip(pr).zip(gr) {
                        *o = pi * (gi - dot);
                    }
                }
                accumulate(grads, *x, Tensor::new(p.shape().to_vec(), dx).unwrap());
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.shape()[1];
                let mut dt = Tensor::zeros(tv.shape());
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g.data()[r * d..(r + 1) * d];
                    for (o, s) in dt.data_mut()[id * d..(id + 1) * d].iter_mut().zip(src) {
                        *o += s;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::Rope {
                x,
                heads,
                head_dim,
                positions,
                base,
            } => {
                let mut dx = g;
                ops::rope_rotate(dx.data_mut(), *heads, *head_dim, positions, *base, true);
                accumulate(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                seq_lens,
                shape,
                cache,
            } => {
                let (dq, dk, dv) = ops::doc_causal_attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    seq_lens,
                    *shape,
                    cache,
                    &g,
                );
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.rg(var) {
                        accumulate(grads, var, d);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let upstream = g.data()[0] / *count as f64;
                let vocab = probs.last_dim();
                let mut d = vec![0.0; probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let row = &mut d[r * vocab..(r + 1) * vocab];
                        for (o, p) in row.iter_mut().zip(probs.row(r)) {
                            *o = p * upstream;
                        }
                        row[t] -= upstream;
                    }
                }
                accumulate(
                    grads,
                    *logits,
                    Tensor::new(probs.shape().to_vec(), d).unwrap(),
                );
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                accumulate(grads, *x, Tensor::full(xv.shape(), g.data()[0]));
            }
        }
    }
}

/// Elementwise sum of two gradients with matching shapes.
pub fn add_grads(a: &mut Tensor, b: &Tensor) -> Result<()> {
    same_shape(a, b, "gradient accumulation")?;
    a.add_assign(b);
    Ok(())
}
