use serde::{Deserialize, Serialize};

use super::data::NiahTask;
use crate::error::{bail, Result};
use crate::exec::Exec;
use crate::mask::CompressedMask;
use crate::model::Model;

/// Anything that answers a retrieval query with one token.
pub trait Predictor: Sync {
    fn max_context(&self) -> usize;
    /// Most likely token after the last token of `tokens`.
    fn predict_next(&self, tokens: &[usize]) -> Result<usize>;
}

impl Predictor for Model {
    fn max_context(&self) -> usize {
        self.config().max_seq_len
    }

    /// Argmax over the final row of the logits; ties go to the lower id.
    fn predict_next(&self, tokens: &[usize]) -> Result<usize> {
        let logits = self.logits(tokens, &CompressedMask::single(tokens.len())?)?;
        let last = logits.row(tokens.len() - 1);
        let mut best = 0;
        for (i, &x) in last.iter().enumerate() {
            if x > last[best] {
                best = i;
            }
        }
        Ok(best)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiahReport {
    pub context_len: usize,
    pub cases: usize,
    pub accuracy: f64,
    /// `(depth, accuracy)` per requested depth.
    pub per_depth: Vec<(f64, f64)>,
}

/// Exact-match retrieval accuracy over `n_cases` haystacks per depth.
pub fn niah_probe(
    model: &dyn Predictor,
    task: &NiahTask,
    context_len: usize,
    n_cases: usize,
    depths: &[f64],
    seed: u64,
    exec: Exec,
) -> Result<NiahReport> {
    if context_len > model.max_context() {
        bail!(
            Argument,
            "context_len {context_len} exceeds the model limit of {}",
            model.max_context()
        );
    }
    if n_cases == 0 || depths.is_empty() {
        bail!(Argument, "NIAH probe needs at least one case and one depth");
    }
    let cases = task.generate(context_len, n_cases, depths, seed)?;
    let hits = exec.map(&cases, |c| {
        model.predict_next(&c.tokens).map(|p| p == c.answer)
    });
    let hits = hits.into_iter().collect::<Result<Vec<bool>>>()?;
    let per_depth = depths
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let ok = hits[i * n_cases..(i + 1) * n_cases]
                .iter()
                .filter(|&&h| h)
                .count();
            (d, ok as f64 / n_cases as f64)
        })
        .collect();
    let total = hits.iter().filter(|&&h| h).count();
    Ok(NiahReport {
        context_len,
        cases: cases.len(),
        accuracy: total as f64 / cases.len() as f64,
        per_depth,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RopeSelection {
    /// `(base, accuracy)` for every candidate, in candidate order.
    pub sweep: Vec<(f64, f64)>,
    pub best_base: f64,
    pub best_accuracy: f64,
}

/// Evaluates the probe once per candidate base and keeps the most accurate
/// one; ties go to the earlier candidate. The model's base is restored.
#[allow(clippy::too_many_arguments)]
pub fn select_rope_base(
    model: &mut Model,
    candidates: &[f64],
    task: &NiahTask,
    context_len: usize,
    n_cases: usize,
    depths: &[f64],
    seed: u64,
    exec: Exec,
) -> Result<RopeSelection> {
    if candidates.is_empty() {
        bail!(Argument, "no candidate RoPE bases");
    }
    let original = model.config().rope_base;
    let mut sweep = Vec::with_capacity(candidates.len());
    for &base in candidates {
        model.set_rope_base(base)?;
        let r = niah_probe(model, task, context_len, n_cases, depths, seed, exec);
        match r {
            Ok(r) => sweep.push((base, r.accuracy)),
            Err(e) => {
                model.set_rope_base(original)?;
                return Err(e);
            }
        }
    }
    model.set_rope_base(original)?;
    let (best_base, best_accuracy) =
        sweep
            .iter()
            .copied()
            .fold(sweep[0], |best, c| if c.1 > best.1 { c } else { best });
    Ok(RopeSelection {
        sweep,
        best_base,
        best_accuracy,
    })
}
