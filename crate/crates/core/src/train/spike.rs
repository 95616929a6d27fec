use serde::{Deserialize, Serialize};

/// MAD to standard deviation factor for normally distributed data.
pub const MAD_TO_STD: f64 = 1.4826;

/// Robust loss-spike detector: step `t` is a spike when
/// `loss[t] > median(prev w) + k * 1.4826 * MAD(prev w)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpikeDetector {
    pub window: usize,
    pub k: f64,
}

impl Default for SpikeDetector {
    fn default() -> Self {
        Self { window: 50, k: 6.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeEvent {
    pub step: usize,
    pub loss: f64,
    pub threshold: f64,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn sorted(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Scans `losses` and returns every spike. Non-finite losses are always
/// reported. Series no longer than the window yield no events.
pub fn detect_spike(losses: &[f64], detector: &SpikeDetector) -> Vec<SpikeEvent> {
    let w = detector.window.max(2);
    let mut events = Vec::new();
    if losses.len() <= w {
        return events;
    }
    for t in w..losses.len() {
        let window = &losses[t - w..t];
        let s = sorted(window.iter().copied());
        let med = median(&s);
        let mad = median(&sorted(s.iter().map(|x| (x - med).abs())));
        let threshold = med + detector.k * MAD_TO_STD * mad;
        let loss = losses[t];
        if !loss.is_finite() || loss > threshold {
            events.push(SpikeEvent {
                step: t,
                loss,
                threshold,
            });
        }
    }
    events
}
