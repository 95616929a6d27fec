use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Closed-form bubble ratio of plain 1F1B: `(p-1)/(p-1+n)`.
pub fn bubble_ratio_1f1b(p: u64, n: u64) -> f64 {
    bubble_ratio_1f1b_exact(p, n).to_f64()
}

/// Closed-form bubble ratio with `v` interleaved chunks per device:
/// `(p-1)/(v*n + p-1)`.
pub fn bubble_ratio_interleaved(p: u64, v: u64, n: u64) -> f64 {
    bubble_ratio_interleaved_exact(p, v, n).to_f64()
}

pub fn bubble_ratio_1f1b_exact(p: u64, n: u64) -> Ratio<u64> {
    bubble_ratio_interleaved_exact(p, 1, n)
}

pub fn bubble_ratio_interleaved_exact(p: u64, v: u64, n: u64) -> Ratio<u64> {
    let (p, v, n) = (p.max(1), v.max(1), n.max(1));
    Ratio::new(p - 1, v * n + p - 1)
}

trait ToF64 {
    fn to_f64(&self) -> f64;
}

impl ToF64 for Ratio<u64> {
    fn to_f64(&self) -> f64 {
        *self.numer() as f64 / *self.denom() as f64
    }
}

/// Forward and backward duration of one virtual stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCost {
    pub fwd: u64,
    pub bwd: u64,
}

/// Pipeline of `p` devices, each holding `v` model chunks, processing `n`
/// micro-batches. Virtual stage `s` lives on device `s % p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub p: usize,
    pub v: usize,
    pub n: usize,
    /// One entry per virtual stage, `p * v` in total.
    pub stage_costs: Vec<StageCost>,
}

impl PipelineSpec {
    /// Every virtual stage costs 1 forward and 2 backward.
    pub fn uniform(p: usize, v: usize, n: usize) -> Self {
        Self {
            p,
            v,
            n,
            stage_costs: vec![StageCost { fwd: 1, bwd: 2 }; p * v],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.v == 0 || self.n == 0 {
            bail!(
                Argument,
                "p, v and n must be at least 1 (got {}, {}, {})",
                self.p,
                self.v,
                self.n
            );
        }
        if self.stage_costs.len() != self.p * self.v {
            bail!(
                Argument,
                "expected {} stage costs, got {}",
                self.p * self.v,
                self.stage_costs.len()
            );
        }
        if self.stage_costs.iter().any(|c| c.fwd == 0 || c.bwd == 0) {
            bail!(Argument, "stage costs must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Fwd,
    Bwd,
    Idle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub kind: EventKind,
    /// `None` for idle gaps.
    pub micro_batch: Option<usize>,
    pub virtual_stage: Option<usize>,
    pub start: u64,
    pub end: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleTimeline {
    pub p: usize,
    pub v: usize,
    pub n: usize,
    /// Per device, busy and idle events covering `[0, makespan)` in order.
    pub devices: Vec<Vec<Event>>,
    pub makespan: u64,
}

impl ScheduleTimeline {
    pub fn busy_time(&self) -> u64 {
        self.devices
            .iter()
            .flatten()
            .filter(|e| e.kind != EventKind::Idle)
            .map(|e| e.end - e.start)
            .sum()
    }

    /// `1 - busy / (p * makespan)` as an exact fraction.
    pub fn idle_fraction(&self) -> Ratio<u64> {
        let total = self.p as u64 * self.makespan;
        Ratio::new(total - self.busy_time(), total)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Op {
    bwd: bool,
    mb: usize,
    stage: usize,
}

/// Position of the k-th forward (or backward) on a device in the interleaved
/// order: micro-batches advance in groups of `p`, every chunk of a group
/// runs before the next group starts, and backward visits chunks in reverse.
fn nth_op(k: usize, p: usize, v: usize, n: usize, device: usize, bwd: bool) -> Op {
    let group = k / (p * v);
    let first = group * p;
    let size = p.min(n - first);
    let within = k - group * p * v;
    let chunk = within / size;
    let mb = first + within % size;
    let chunk = if bwd { v - 1 - chunk } else { chunk };
    Op {
        bwd,
        mb,
        stage: chunk * p + device,
    }
}

/// Device-local op order: warmup forwards, alternating forward/backward
/// pairs, then the remaining backwards. `extra` lengthens the warmup.
fn device_order(p: usize, v: usize, n: usize, device: usize, extra: usize) -> Vec<Op> {
    let total = n * v;
    let warmup = if v == 1 {
        p - device - 1
    } else {
        (p - device - 1) * 2 + (v - 1) * p
    };
    let warmup = (warmup + extra).min(total);
    let mut ops = Vec::with_capacity(2 * total);
    let (mut f, mut b) = (0, 0);
    while f < warmup {
        ops.push(nth_op(f, p, v, n, device, false));
        f += 1;
    }
    while f < total {
        ops.push(nth_op(f, p, v, n, device, false));
        f += 1;
        ops.push(nth_op(b, p, v, n, device, true));
        b += 1;
    }
    while b < total {
        ops.push(nth_op(b, p, v, n, device, true));
        b += 1;
    }
    ops
}

/// Event-driven simulation: every device runs its ops in order, each op
/// starting once the device is free and its producer has finished. A forward
/// on stage `s` needs the forward of `s-1`; a backward on `s` needs the
/// backward of `s+1`, or the last forward when `s` is the final stage.
///
/// When `n` is not a multiple of `p` the interleaved order can deadlock; the
/// warmup of every device is then lengthened one step at a time, which ends
/// at all-forwards-first at the latest.
pub fn simulate_schedule(spec: &PipelineSpec) -> Result<ScheduleTimeline> {
    spec.validate()?;
    let mut extra = 0;
    loop {
        match run_orders(spec, extra) {
            Err(_) if extra < spec.n * spec.v => extra += 1,
            r => return r,
        }
    }
}

fn run_orders(spec: &PipelineSpec, extra: usize) -> Result<ScheduleTimeline> {
    let (p, v, n) = (spec.p, spec.v, spec.n);
    let stages = p * v;
    let orders: Vec<Vec<Op>> = (0..p).map(|d| device_order(p, v, n, d, extra)).collect();
    let mut fwd_done: Vec<Option<u64>> = vec![None; stages * n];
    let mut bwd_done: Vec<Option<u64>> = vec![None; stages * n];
    let mut cursor = vec![0usize; p];
    let mut free_at = vec![0u64; p];
    let mut busy: Vec<Vec<Event>> = vec![Vec::with_capacity(2 * n * v); p];
    let mut remaining: usize = orders.iter().map(Vec::len).sum();
    while remaining > 0 {
        let mut progressed = false;
        for d in 0..p {
            while let Some(&op) = orders[d].get(cursor[d]) {
                let dep = match (op.bwd, op.stage) {
                    (false, 0) => Some(0),
                    (false, s) => fwd_done[(s - 1) * n + op.mb],
                    (true, s) if s + 1 == stages => fwd_done[s * n + op.mb],
                    (true, s) => bwd_done[(s + 1) * n + op.mb],
                };
                let Some(ready) = dep else { break };
                let cost = spec.stage_costs[op.stage];
                let start = ready.max(free_at[d]);
                let end = start + if op.bwd { cost.bwd } else { cost.fwd };
                let slot = op.stage * n + op.mb;
                if op.bwd {
                    bwd_done[slot] = Some(end);
                } else {
                    fwd_done[slot] = Some(end);
                }
                busy[d].push(Event {
                    kind: if op.bwd {
                        EventKind::Bwd
                    } else {
                        EventKind::Fwd
                    },
                    micro_batch: Some(op.mb),
                    virtual_stage: Some(op.stage),
                    start,
                    end,
                });
                free_at[d] = end;
                cursor[d] += 1;
                remaining -= 1;
                progressed = true;
            }
        }
        if !progressed {
            bail!(
                Internal,
                "pipeline schedule deadlocked with {remaining} ops pending (p={p}, v={v}, n={n})"
            );
        }
    }
    let makespan = free_at.iter().copied().max().unwrap_or(0);
    let devices = busy
        .into_iter()
        .map(|events| {
            let mut out = Vec::with_capacity(events.len() * 2 + 1);
            let mut t = 0;
            for e in events {
                if e.start > t {
                    out.push(idle(t, e.start));
                }
                t = e.end;
                out.push(e);
            }
            if t < makespan {
                out.push(idle(t, makespan));
            }
            out
        })
        .collect();
    Ok(ScheduleTimeline {
        p,
        v,
        n,
        devices,
        makespan,
    })
}

fn idle(start: u64, end: u64) -> Event {
    Event {
        kind: EventKind::Idle,
        micro_batch: None,
        virtual_stage: None,
        start,
        end,
    }
}
