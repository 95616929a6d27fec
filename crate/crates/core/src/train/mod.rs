//! Optimization stack: AdamW, schedules, multi-phase plans, spike detection
//! and the retrieval probe.

pub mod data;
pub mod niah;
pub mod optim;
pub mod phases;
pub mod schedule;
pub mod spike;

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

pub use data::{CorpusSpec, DataSource, NiahCase, NiahCorpus, NiahTask, Sequence, SyntheticCorpus};
pub use niah::{niah_probe, select_rope_base, NiahReport, Predictor, RopeSelection};
pub use optim::{adamw_step, clip_grads, global_norm, AdamWState, OptimHyper};
pub use phases::{Phase, PhasePlan, PhaseSchedule, RampPoint};
pub use schedule::{lr_at, LrSchedule, ScheduleKind};
pub use spike::{detect_spike, SpikeDetector, SpikeEvent};

use crate::error::{bail, Result};
use crate::exec::Exec;
use crate::model::Model;
use crate::tensor::Tensor;
use crate::Error;

/// One optimizer step as logged. `loss` and `grad_norm` are `None` when the
/// step produced non-finite values and the update was skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub step: u64,
    pub phase: String,
    pub tokens_seen: u64,
    pub loss: Option<f64>,
    pub grad_norm: Option<f64>,
    pub lr: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub rope_base: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<StepRecord>,
    /// Set when the data source ran dry before the plan finished.
    pub stopped_early: bool,
}

impl RunLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records
            .iter()
            .map(|r| r.loss.unwrap_or(f64::NAN))
            .collect()
    }

    pub fn grad_norms(&self) -> Vec<f64> {
        self.records
            .iter()
            .map(|r| r.grad_norm.unwrap_or(f64::NAN))
            .collect()
    }

    pub fn non_finite_steps(&self) -> usize {
        self.records.iter().filter(|r| r.loss.is_none()).count()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| Error::Internal(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::Internal(e.to_string()))?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
            records.push(rec);
        }
        Ok(Self {
            records,
            stopped_early: false,
        })
    }
}

/// Receives a read-only view after every step.
pub trait TelemetrySink {
    fn on_step(&mut self, record: &StepRecord, model: &Model) -> Result<()>;
}

impl TelemetrySink for () {
    fn on_step(&mut self, _: &StepRecord, _: &Model) -> Result<()> {
        Ok(())
    }
}

/// Streams records as JSON lines.
pub struct JsonlSink<W: Write>(pub W);

impl<W: Write> TelemetrySink for JsonlSink<W> {
    fn on_step(&mut self, record: &StepRecord, _: &Model) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| Error::Internal(e.to_string()))?;
        writeln!(self.0, "{line}").map_err(|e| Error::Internal(format!("telemetry sink: {e}")))
    }
}

/// Forwards record snapshots to another thread.
impl TelemetrySink for std::sync::mpsc::Sender<StepRecord> {
    fn on_step(&mut self, record: &StepRecord, _: &Model) -> Result<()> {
        self.send(record.clone())
            .map_err(|_| Error::Internal("telemetry receiver hung up".into()))
    }
}

impl<F: FnMut(&StepRecord, &Model) -> Result<()>> TelemetrySink for F {
    fn on_step(&mut self, record: &StepRecord, model: &Model) -> Result<()> {
        self(record, model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainOptions {
    pub optim: OptimHyper,
    pub exec: Exec,
    /// Hard cap on optimizer steps across all phases.
    pub max_steps: Option<u64>,
}

/// Per-sequence results are combined in batch order weighted by their
/// labelled-token counts, so the batch loss is the mean over all labelled
/// tokens regardless of how sequences were evaluated.
fn batch_loss_and_grads(
    model: &Model,
    batch: &[Sequence],
    exec: Exec,
) -> Result<(f64, Vec<Tensor>)> {
    let results = exec.map(batch, |s| {
        model
            .loss_and_grads(&s.tokens, &s.targets, &s.mask)
            .map(|(l, g)| (l, g, s.labelled()))
    });
    let total: usize = batch.iter().map(Sequence::labelled).sum();
    if total == 0 {
        bail!(Argument, "batch has no labelled tokens");
    }
    let mut loss = 0.0;
    let mut grads: Option<Vec<Tensor>> = None;
    for r in results {
        let (l, mut g, n) = r?;
        let w = n as f64 / total as f64;
        loss += w * l;
        if w != 1.0 {
            g.iter_mut().for_each(|t| t.scale_in_place(w));
        }
        match &mut grads {
            None => grads = Some(g),
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
        }
    }
    Ok((loss, grads.expect("batch is non-empty")))
}

/// Executes `plan` on `model`. The RoPE base is switched at each phase
/// boundary, batch sizes follow each phase's ramp in phase-relative tokens,
/// and gradients are clipped after full-batch accumulation. Steps whose loss
/// or gradients are non-finite are logged with empty values and skipped.
pub fn run_phase_plan(
    plan: &PhasePlan,
    model: &mut Model,
    data: &mut dyn DataSource,
    sink: &mut dyn TelemetrySink,
    opts: &TrainOptions,
) -> Result<RunLog> {
    plan.validate()?;
    opts.optim.validate()?;
    for p in &plan.phases {
        if p.seq_len > model.config().max_seq_len {
            bail!(
                Config,
                "phase `{}` seq_len {} exceeds model max_seq_len {}",
                p.name,
                p.seq_len,
                model.config().max_seq_len
            );
        }
    }
    let mut state = AdamWState::new(model.named_params().into_iter().map(|(_, t)| t));
    let mut log = RunLog::default();
    let mut tokens_seen = 0u64;
    let mut step = 0u64;
    'phases: for phase in &plan.phases {
        model.set_rope_base(phase.rope_base)?;
        let schedule = phase.lr_schedule();
        let mut phase_tokens = 0u64;
        let mut phase_step = 0u64;
        while phase_tokens < phase.token_budget {
            if opts.max_steps.is_some_and(|m| step >= m) {
                break 'phases;
            }
            let batch_size = phase.batch_at(phase_tokens);
            let mut batch = Vec::with_capacity(batch_size);
            for _ in 0..batch_size {
                match data.next_sequence(phase.seq_len)? {
                    Some(s) => batch.push(s),
                    None => {
                        log.stopped_early = true;
                        break 'phases;
                    }
                }
            }
            let lr = schedule.lr_at(phase_step.min(schedule.total_steps))?;
            let outcome =
                batch_loss_and_grads(model, &batch, opts.exec).and_then(|(loss, mut grads)| {
                    let norm = clip_grads(&mut grads, opts.optim.clip_norm)?;
                    let mut params = model.params_mut();
                    adamw_step(&mut params, &grads, &mut state, &opts.optim, lr)?;
                    Ok((loss, norm))
                });
            let (loss, grad_norm) = match outcome {
                Ok((l, n)) => (Some(l), Some(n)),
                Err(Error::Numeric(_)) => (None, None),
                Err(e) => return Err(e),
            };
            let n_tokens = batch_size as u64 * phase.seq_len as u64;
            phase_tokens += n_tokens;
            tokens_seen += n_tokens;
            let record = StepRecord {
                step,
                phase: phase.name.clone(),
                tokens_seen,
                loss,
                grad_norm,
                lr,
                batch_size,
                seq_len: phase.seq_len,
                rope_base: phase.rope_base,
            };
            sink.on_step(&record, model)?;
            log.records.push(record);
            step += 1;
            phase_step += 1;
        }
    }
    Ok(log)
}
