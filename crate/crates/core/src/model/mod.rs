//! Dense decoder-only transformer with Pre-LN, sandwich and depth-scaled
//! sandwich normalization, grouped-query attention and rotary positions.

pub mod checkpoint;
mod config;
mod init;
mod rope;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{InitScheme, ModelConfig, NormScheme};
pub use init::{gamma_init, init_std, residual_init_std};
pub use rope::RopeConfig;

use crate::error::{bail, Error, Result};
use crate::mask::CompressedMask;
use crate::tensor::ops::AttnShape;
use crate::tensor::{Tape, Tensor, Var};

/// Parameters of one transformer layer. Weight matrices are stored
/// `[in, out]` so activations multiply on the left.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
    pub gamma_pre_attn: Tensor,
    pub gamma_pre_mlp: Tensor,
    /// Absent under Pre-LN.
    pub gamma_post_attn: Option<Tensor>,
    pub gamma_post_mlp: Option<Tensor>,
}

/// The block a depth-scaled sandwich-norm model is built from.
pub type DssnBlock = Block;

/// Activation sites recorded during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Site {
    /// Output of the attention output projection (before any post-norm).
    #[serde(rename = "attn_out_proj")]
    AttnOutProj,
    /// Output of the FFN down projection (before any post-norm).
    #[serde(rename = "ffn_down_proj")]
    FfnDownProj,
    /// Input of the attention output projection.
    #[serde(rename = "attn_out_proj_in")]
    AttnOutProjInput,
    /// Input of the FFN down projection.
    #[serde(rename = "ffn_down_proj_in")]
    FfnDownProjInput,
}

impl Site {
    pub const ALL: [Site; 4] = [
        Site::AttnOutProj,
        Site::FfnDownProj,
        Site::AttnOutProjInput,
        Site::FfnDownProjInput,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Site::AttnOutProj => "attn_out_proj",
            Site::FfnDownProj => "ffn_down_proj",
            Site::AttnOutProjInput => "attn_out_proj_in",
            Site::FfnDownProjInput => "ffn_down_proj_in",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Site::ALL
            .into_iter()
            .find(|site| site.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown probe site `{s}`")))
    }

    fn slot(self) -> usize {
        self as usize
    }
}

/// Tape handles of one block's parameters.
#[derive(Debug, Clone)]
pub struct BlockVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
    pub gamma_pre_attn: Var,
    pub gamma_pre_mlp: Var,
    pub gamma_post_attn: Option<Var>,
    pub gamma_post_mlp: Option<Var>,
}

impl Block {
    fn build(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (d, l) = (cfg.d_model, cfg.n_layers);
        let std = init_std(cfg.init_scheme, d, l)?;
        let res_std = residual_init_std(cfg.init_scheme, d, l)?;
        let kv = cfg.kv_width();
        let (gamma_post_attn, gamma_post_mlp) = match cfg.norm_scheme {
            NormScheme::PreLn => (None, None),
            NormScheme::Sandwich => (
                Some(Tensor::full(&[d], cfg.c_attn)),
                Some(Tensor::full(&[d], cfg.c_mlp)),
            ),
            NormScheme::Dssn => (
                Some(Tensor::full(&[d], gamma_init(cfg.c_attn, l)?)),
                Some(Tensor::full(&[d], gamma_init(cfg.c_mlp, l)?)),
            ),
        };
        Ok(Self {
            wq: Tensor::randn(&[d, d], std, rng),
            wk: Tensor::randn(&[d, kv], std, rng),
            wv: Tensor::randn(&[d, kv], std, rng),
            wo: Tensor::randn(&[d, d], res_std, rng),
            w_gate: Tensor::randn(&[d, cfg.ffn_inner], std, rng),
            w_up: Tensor::randn(&[d, cfg.ffn_inner], std, rng),
            w_down: Tensor::randn(&[cfg.ffn_inner, d], res_std, rng),
            gamma_pre_attn: Tensor::ones(&[d]),
            gamma_pre_mlp: Tensor::ones(&[d]),
            gamma_post_attn,
            gamma_post_mlp,
        })
    }

    /// Parameters with their names, in a fixed order.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = vec![
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("w_gate", &self.w_gate),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
            ("gamma_pre_attn", &self.gamma_pre_attn),
            ("gamma_pre_mlp", &self.gamma_pre_mlp),
        ];
        if let Some(g) = &self.gamma_post_attn {
            v.push(("gamma_post_attn", g));
        }
        if let Some(g) = &self.gamma_post_mlp {
            v.push(("gamma_post_mlp", g));
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
            &mut self.gamma_pre_attn,
            &mut self.gamma_pre_mlp,
        ];
        if let Some(g) = &mut self.gamma_post_attn {
            v.push(g);
        }
        if let Some(g) = &mut self.gamma_post_mlp {
            v.push(g);
        }
        v
    }

    /// Borrows every parameter into `tape`.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> BlockVars {
        BlockVars {
            wq: tape.param(&self.wq),
            wk: tape.param(&self.wk),
            wv: tape.param(&self.wv),
            wo: tape.param(&self.wo),
            w_gate: tape.param(&self.w_gate),
            w_up: tape.param(&self.w_up),
            w_down: tape.param(&self.w_down),
            gamma_pre_attn: tape.param(&self.gamma_pre_attn),
            gamma_pre_mlp: tape.param(&self.gamma_pre_mlp),
            gamma_post_attn: self.gamma_post_attn.as_ref().map(|g| tape.param(g)),
            gamma_post_mlp: self.gamma_post_mlp.as_ref().map(|g| tape.param(g)),
        }
    }
}

impl BlockVars {
    fn in_order(&self) -> Vec<Var> {
        let mut v = vec![
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.w_gate,
            self.w_up,
            self.w_down,
            self.gamma_pre_attn,
            self.gamma_pre_mlp,
        ];
        v.extend(self.gamma_post_attn);
        v.extend(self.gamma_post_mlp);
        v
    }
}

/// Adds a sub-layer output to the residual stream:
/// `h + Norm(gamma_post, branch)` when a post-norm is present, `h + branch` otherwise.
pub fn residual_branch(
    tape: &mut Tape<'_>,
    h: Var,
    branch: Var,
    gamma_post: Option<Var>,
    eps: f64,
) -> Result<Var> {
    match gamma_post {
        Some(g) => {
            let n = tape.rmsnorm(branch, g, eps)?;
            tape.add(h, n)
        }
        None => tape.add(h, branch),
    }
}

/// Geometry and numerics shared by every block of a model.
#[derive(Debug, Clone, Copy)]
pub struct BlockGeometry {
    pub attn: AttnShape,
    pub eps: f64,
    pub rope_base: f64,
}

impl BlockGeometry {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self {
            attn: AttnShape {
                q_heads: cfg.n_q_heads,
                kv_heads: cfg.n_kv_heads,
                head_dim: cfg.head_dim(),
            },
            eps: cfg.norm_eps,
            rope_base: cfg.rope_base,
        }
    }
}

/// One layer on the tape: attention sub-layer then FFN sub-layer, each
/// wrapped by [`residual_branch`]. Returns the new residual stream and the
/// four probe sites in [`Site`] order.
pub fn block_forward(
    tape: &mut Tape<'_>,
    geo: BlockGeometry,
    p: &BlockVars,
    h: Var,
    mask: &CompressedMask,
    positions: &[usize],
) -> Result<(Var, [Var; 4])> {
    let AttnShape {
        q_heads,
        kv_heads,
        head_dim,
    } = geo.attn;
    let x = tape.rmsnorm(h, p.gamma_pre_attn, geo.eps)?;
    let q = tape.matmul(x, p.wq)?;
    let k = tape.matmul(x, p.wk)?;
    let v = tape.matmul(x, p.wv)?;
    let q = tape.rope(q, q_heads, head_dim, positions, geo.rope_base)?;
    let k = tape.rope(k, kv_heads, head_dim, positions, geo.rope_base)?;
    let a = tape.attention(q, k, v, mask.seq_lens(), geo.attn)?;
    let o = tape.matmul(a, p.wo)?;
    let h = residual_branch(tape, h, o, p.gamma_post_attn, geo.eps)?;

    let x = tape.rmsnorm(h, p.gamma_pre_mlp, geo.eps)?;
    let gate = tape.matmul(x, p.w_gate)?;
    let up = tape.matmul(x, p.w_up)?;
    let s = tape.swiglu(gate, up)?;
    let dn = tape.matmul(s, p.w_down)?;
    let h = residual_branch(tape, h, dn, p.gamma_post_mlp, geo.eps)?;
    Ok((h, [o, dn, a, s]))
}

/// Applies one block to `h: [T, d]` outside of any training tape.
pub fn dssn_block_forward(
    h: &Tensor,
    block: &Block,
    cfg: &ModelConfig,
    mask: &CompressedMask,
) -> Result<Tensor> {
    if h.rank() != 2 || h.last_dim() != cfg.d_model || h.rows() != mask.total() {
        bail!(
            Dimension,
            "block input {:?} inconsistent with d_model {} and mask of {} tokens",
            h.shape(),
            cfg.d_model,
            mask.total()
        );
    }
    let mut tape = Tape::new();
    let vars = block.bind(&mut tape);
    let hv = tape.constant(h.clone());
    let (out, _) = block_forward(
        &mut tape,
        BlockGeometry::from_config(cfg),
        &vars,
        hv,
        mask,
        &mask.local_positions(),
    )?;
    let out = tape.value(out).clone();
    out.check_finite("block 0 output")?;
    Ok(out)
}

/// Result of binding a model onto a tape and running the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Var,
    /// Parameter handles in [`Model::named_params`] order.
    pub params: Vec<Var>,
    /// Per layer, the probe sites in [`Site::ALL`] order.
    pub sites: Vec<[Var; 4]>,
    /// Residual stream after each layer.
    pub hidden: Vec<Var>,
}

impl ForwardTrace {
    pub fn site(&self, layer: usize, site: Site) -> Var {
        self.sites[layer][site.slot()]
    }
}

/// Dense decoder: embedding, `L` blocks, final RMSNorm and an untied output head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub embed: Tensor,
    pub blocks: Vec<Block>,
    pub final_norm: Tensor,
    pub lm_head: Tensor,
}

impl Model {
    /// Draws every weight from its scheme's normal distribution with a
    /// ChaCha8 stream seeded by `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, v) = (config.d_model, config.vocab_size);
        let embed = Tensor::randn(&[v, d], config.embed_std, &mut rng);
        let blocks = (0..config.n_layers)
            .map(|_| Block::build(&config, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let std = init_std(config.init_scheme, d, config.n_layers)?;
        let lm_head = Tensor::randn(&[d, v], std, &mut rng);
        Ok(Self {
            final_norm: Tensor::ones(&[d]),
            config,
            embed,
            blocks,
            lm_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Overrides the rotary base used by subsequent forward passes.
    pub fn set_rope_base(&mut self, base: f64) -> Result<()> {
        if !(base > 0.0 && base.is_finite()) {
            bail!(Config, "rope base must be positive, got {base}");
        }
        self.config.rope_base = base;
        Ok(())
    }

    /// Every parameter with a stable dotted name.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(
                b.named()
                    .into_iter()
                    .map(|(n, t)| (format!("blocks.{i}.{n}"), t)),
            );
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    /// Mutable parameters in [`Model::named_params`] order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embed];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Rebuilds a model from named tensors (checkpoint loading).
    pub fn from_named(config: ModelConfig, mut tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::build(config, 0)?;
        let names: Vec<(String, Vec<usize>)> = model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if names.len() != tensors.len() {
            bail!(
                Parse,
                "checkpoint holds {} tensors, model expects {}",
                tensors.len(),
                names.len()
            );
        }
        for (slot, ((name, shape), (got_name, t))) in model
            .params_mut()
            .into_iter()
            .zip(names.iter().zip(tensors.drain(..)))
        {
            if *name != got_name || t.shape() != shape.as_slice() {
                bail!(
                    Parse,
                    "checkpoint tensor `{got_name}` {:?} does not match expected `{name}` {:?}",
                    t.shape(),
                    shape
                );
            }
            *slot = t;
        }
        Ok(model)
    }

    fn check_input(&self, tokens: &[usize], mask: &CompressedMask) -> Result<()> {
        if tokens.is_empty() {
            bail!(Argument, "empty token sequence");
        }
        if mask.total() != tokens.len() {
            bail!(
                Dimension,
                "mask covers {} tokens but the sequence has {}",
                mask.total(),
                tokens.len()
            );
        }
        if tokens.len() > self.config.max_seq_len {
            bail!(
                Argument,
                "sequence of {} tokens exceeds the model limit of {}",
                tokens.len(),
                self.config.max_seq_len
            );
        }
        Ok(())
    }

    /// Runs the forward pass on `tape`. Positions restart at 0 in every
    /// document of `mask`.
    pub fn forward_on<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        tokens: &[usize],
        mask: &CompressedMask,
    ) -> Result<ForwardTrace> {
        self.check_input(tokens, mask)?;
        let geo = BlockGeometry::from_config(&self.config);
        let positions = mask.local_positions();
        let mut params = Vec::new();
        let embed = tape.param(&self.embed);
        params.push(embed);
        let mut h = tape.embedding(embed, tokens)?;
        let mut sites = Vec::with_capacity(self.blocks.len());
        let mut hidden = Vec::with_capacity(self.blocks.len());
        for (layer, block) in self.blocks.iter().enumerate() {
            let vars = block.bind(tape);
            params.extend(vars.in_order());
            let (next, s) = block_forward(tape, geo, &vars, h, mask, &positions)?;
            tape.value(next)
                .check_finite(&format!("layer {layer} output"))?;
            h = next;
            sites.push(s);
            hidden.push(h);
        }
        let fnorm = tape.param(&self.final_norm);
        let head = tape.param(&self.lm_head);
        params.push(fnorm);
        params.push(head);
        let x = tape.rmsnorm(h, fnorm, self.config.norm_eps)?;
        let logits = tape.matmul(x, head)?;
        Ok(ForwardTrace {
            logits,
            params,
            sites,
            hidden,
        })
    }

    /// Logits `[T, vocab]` for a packed sequence.
    pub fn logits(&self, tokens: &[usize], mask: &CompressedMask) -> Result<Tensor> {
        let mut tape = Tape::new();
        let trace = self.forward_on(&mut tape, tokens, mask)?;
        Ok(tape.value(trace.logits).clone())
    }

    /// Mean cross-entropy over labelled positions and its gradient with
    /// respect to every parameter, in [`Model::named_params`] order.
    pub fn loss_and_grads(
        &self,
        tokens: &[usize],
        targets: &[Option<usize>],
        mask: &CompressedMask,
    ) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let trace = self.forward_on(&mut tape, tokens, mask)?;
        let loss = tape.cross_entropy(trace.logits, targets)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            bail!(Numeric, "non-finite loss {value}");
        }
        let mut grads = tape.backward(loss)?;
        let out = trace
            .params
            .iter()
            .zip(self.named_params())
            .map(|(v, (_, t))| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((value, out))
    }
}

#[cfg(test)]
mod tests;
