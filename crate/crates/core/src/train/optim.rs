use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// AdamW and clipping hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for OptimHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: 1.0,
        }
    }
}

impl OptimHyper {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            bail!(
                Config,
                "betas must lie in [0, 1), got {} / {}",
                self.beta1,
                self.beta2
            );
        }
        if !(self.eps > 0.0) {
            bail!(Config, "eps must be positive");
        }
        if !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            bail!(Config, "weight_decay must be >= 0 and clip_norm > 0");
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Whether decoupled weight decay applies to each parameter.
    pub decay: Vec<bool>,
}

impl AdamWState {
    /// Zero moments for `params`; weight decay applies to tensors of rank >= 2
    /// (matrices and embeddings), not to norm scales.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let mut m = Vec::new();
        let mut decay = Vec::new();
        for p in params {
            m.push(Tensor::zeros(p.shape()));
            decay.push(p.rank() >= 2);
        }
        Self {
            step: 0,
            v: m.clone(),
            m,
            decay,
        }
    }
}

/// One AdamW update. Weight decay is decoupled, `theta -= lr * wd * theta`,
/// and applied before the bias-corrected adaptive step. Non-finite gradients
/// abort the step with the parameters and state untouched.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamWState,
    hp: &OptimHyper,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        bail!(
            Dimension,
            "adamw: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        );
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].shape() != p.shape() {
            bail!(Dimension, "adamw: shape mismatch at parameter {i}");
        }
        g.check_finite(&format!("gradient of parameter {i}"))?;
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let (b1, b2, eps) = (hp.beta1, hp.beta2, hp.eps);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let keep = if state.decay[i] {
            1.0 - lr * hp.weight_decay
        } else {
            1.0
        };
        let (th, g) = (p.data_mut(), g.data());
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let n = th.len();
        let (g, m, v) = (&g[..n], &mut m[..n], &mut v[..n]);
        for j in 0..n {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            th[j] = keep * th[j] - lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Global L2 norm of all gradients, accumulated in order.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt()
}

/// Rescales every gradient by `max_norm / norm` when the global norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grads(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        bail!(Argument, "max_norm must be positive, got {max_norm}");
    }
    let norm = global_norm(grads);
    if !norm.is_finite() {
        bail!(Numeric, "non-finite global gradient norm {norm}");
    }
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(scale);
        }
    }
    Ok(norm)
}
