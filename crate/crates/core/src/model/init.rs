//! Depth- and width-scaled initialization constants.

use super::config::InitScheme;
use crate::error::{bail, Result};

/// Initial post-norm scale `c / sqrt(L)`.
pub fn gamma_init(c: f64, n_layers: usize) -> Result<f64> {
    if n_layers == 0 {
        bail!(Argument, "gamma_init needs at least one layer");
    }
    if !(c > 0.0) {
        bail!(Argument, "gamma_init needs a positive constant, got {c}");
    }
    Ok(c / (n_layers as f64).sqrt())
}

/// Standard deviation of a regular weight matrix under `scheme`.
pub fn init_std(scheme: InitScheme, d: usize, n_layers: usize) -> Result<f64> {
    if d == 0 || n_layers == 0 {
        bail!(
            Argument,
            "init_std needs d >= 1 and L >= 1, got d={d}, L={n_layers}"
        );
    }
    let (d, l) = (d as f64, n_layers as f64);
    Ok(match scheme {
        InitScheme::TinyInit => (1.0 / (2.0 * d * l)).sqrt(),
        InitScheme::SmallInit | InitScheme::SmallInitResidualScaled => (2.0 / (5.0 * d)).sqrt(),
    })
}

/// Standard deviation of a residual output projection (attention output and
/// FFN down projection).
pub fn residual_init_std(scheme: InitScheme, d: usize, n_layers: usize) -> Result<f64> {
    let base = init_std(scheme, d, n_layers)?;
    Ok(match scheme {
        InitScheme::SmallInitResidualScaled => base / (n_layers as f64).sqrt(),
        _ => base,
    })
}
