use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

/// Placement of normalization around each sub-layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScheme {
    /// `h <- h + F(Norm(h))`
    PreLn,
    /// `h <- h + Norm(gamma_post, F(Norm(h)))` with `gamma_post = c`.
    Sandwich,
    /// Sandwich with `gamma_post = c / sqrt(L)`.
    Dssn,
}

/// Weight initialization scheme for all non-embedding matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// `std = sqrt(2 / (5 d))`
    SmallInit,
    /// Small init with residual output projections further divided by `sqrt(L)`.
    SmallInitResidualScaled,
    /// `std = sqrt(1 / (2 d L))`
    TinyInit,
}

macro_rules! str_enum {
    ($ty:ty { $($name:literal => $variant:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::Argument(format!(
                        "unknown {} `{other}`", stringify!($ty)
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let name = match self {
                    $(v if *v == $variant => $name,)+
                    _ => unreachable!(),
                };
                f.write_str(name)
            }
        }
    };
}

str_enum!(NormScheme {
    "pre_ln" => NormScheme::PreLn,
    "sandwich" => NormScheme::Sandwich,
    "dssn" => NormScheme::Dssn,
});

str_enum!(InitScheme {
    "small_init" => InitScheme::SmallInit,
    "small_init_residual_scaled" => InitScheme::SmallInitResidualScaled,
    "tiny_init" => InitScheme::TinyInit,
});

fn default_norm_eps() -> f64 {
    1e-6
}

fn default_max_seq_len() -> usize {
    4096
}

/// Architectural hyperparameters of the dense decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub ffn_inner: usize,
    pub vocab_size: usize,
    pub norm_scheme: NormScheme,
    pub init_scheme: InitScheme,
    pub c_attn: f64,
    pub c_mlp: f64,
    pub rope_base: f64,
    pub embed_std: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    /// Longest context the model accepts.
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// Full-size reference architecture (94 layers, width 12288).
    pub fn reference() -> Self {
        Self {
            n_layers: 94,
            d_model: 12288,
            n_q_heads: 96,
            n_kv_heads: 8,
            ffn_inner: 28672,
            vocab_size: 153_376,
            norm_scheme: NormScheme::Dssn,
            init_scheme: InitScheme::TinyInit,
            c_attn: 0.283,
            c_mlp: 0.432,
            rope_base: 1e4,
            embed_std: 0.5,
            norm_eps: default_norm_eps(),
            max_seq_len: 131_072,
        }
    }

    /// Desk-scale default: 8 layers, width 128, 8 query / 2 kv heads.
    pub fn toy() -> Self {
        Self {
            n_layers: 8,
            d_model: 128,
            n_q_heads: 8,
            n_kv_heads: 2,
            ffn_inner: 384,
            vocab_size: 512,
            max_seq_len: 1024,
            ..Self::reference()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_q_heads.max(1)
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            bail!(Config, "n_layers must be at least 1");
        }
        if self.d_model == 0 || self.ffn_inner == 0 || self.vocab_size == 0 {
            bail!(Config, "d_model, ffn_inner and vocab_size must be positive");
        }
        if self.n_q_heads == 0 || self.n_kv_heads == 0 {
            bail!(Config, "head counts must be positive");
        }
        if !self.n_q_heads.is_multiple_of(self.n_kv_heads) {
            bail!(
                Config,
                "n_q_heads ({}) must be divisible by n_kv_heads ({})",
                self.n_q_heads,
                self.n_kv_heads
            );
        }
        if !self.d_model.is_multiple_of(self.n_q_heads) {
            bail!(
                Config,
                "d_model ({}) must be divisible by n_q_heads ({})",
                self.d_model,
                self.n_q_heads
            );
        }
        if !self.head_dim().is_multiple_of(2) {
            bail!(
                Config,
                "head dimension {} must be even for rotary embedding",
                self.head_dim()
            );
        }
        if !(self.c_attn > 0.0 && self.c_mlp > 0.0) {
            bail!(Config, "c_attn and c_mlp must be positive");
        }
        if !(self.rope_base > 0.0 && self.rope_base.is_finite()) {
            bail!(Config, "rope_base must be positive");
        }
        if !(self.embed_std >= 0.0 && self.norm_eps > 0.0) {
            bail!(
                Config,
                "embed_std must be non-negative and norm_eps positive"
            );
        }
        if self.max_seq_len == 0 {
            bail!(Config, "max_seq_len must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_matches_published_shape() {
        let c = ModelConfig::reference();
        c.validate().unwrap();
        assert_eq!((c.n_layers, c.d_model), (94, 12288));
        assert_eq!((c.n_q_heads, c.n_kv_heads, c.ffn_inner), (96, 8, 28672));
        assert_eq!((c.c_attn, c.c_mlp, c.embed_std), (0.283, 0.432, 0.5));
        assert_eq!(c.head_dim(), 128);
    }

    #[test]
    fn toy_is_valid() {
        let c = ModelConfig::toy();
        c.validate().unwrap();
        assert_eq!(
            (c.n_layers, c.d_model, c.n_q_heads, c.n_kv_heads),
            (8, 128, 8, 2)
        );
        assert_eq!((c.ffn_inner, c.vocab_size), (384, 512));
    }

    #[test]
    fn divisibility_is_enforced() {
        let mut c = ModelConfig::toy();
        c.n_kv_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::toy();
        c.n_q_heads = 6;
        c.n_kv_heads = 2;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.n_layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in ["pre_ln", "sandwich", "dssn"] {
            assert_eq!(s.parse::<NormScheme>().unwrap().to_string(), s);
        }
        for s in ["small_init", "small_init_residual_scaled", "tiny_init"] {
            assert_eq!(s.parse::<InitScheme>().unwrap().to_string(), s);
        }
        assert!(matches!(
            "xavier".parse::<InitScheme>(),
            Err(Error::Argument(_))
        ));
    }
}
