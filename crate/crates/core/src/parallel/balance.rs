use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use super::pipeline::{simulate_schedule, PipelineSpec, StageCost};
use crate::error::{bail, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageAssignment {
    /// Layer index ranges `[start, end)`, one per virtual stage.
    pub groups: Vec<(usize, usize)>,
    pub group_costs: Vec<u64>,
    pub max_cost: u64,
}

impl StageAssignment {
    pub fn sizes(&self) -> Vec<usize> {
        self.groups.iter().map(|(a, b)| b - a).collect()
    }
}

/// Fewest contiguous groups with every group cost at most `cap`.
fn groups_needed(costs: &[u64], cap: u64) -> usize {
    let mut groups = 1;
    let mut acc = 0;
    for &c in costs {
        if acc + c > cap {
            groups += 1;
            acc = c;
        } else {
            acc += c;
        }
    }
    groups
}

/// Splits `layer_costs` into `p * v` contiguous non-empty groups minimizing
/// the largest group cost. The optimum is found by searching the cap over
/// integer costs; among optimal splits the one filling earlier groups first
/// is returned.
pub fn balance_stages(layer_costs: &[u64], p: usize, v: usize) -> Result<StageAssignment> {
    let k = p * v;
    if k == 0 {
        bail!(Argument, "p and v must be at least 1");
    }
    if layer_costs.len() < k {
        bail!(
            Argument,
            "{} layers cannot fill {k} virtual stages",
            layer_costs.len()
        );
    }
    let (mut lo, mut hi) = (
        layer_costs.iter().copied().max().unwrap_or(0),
        layer_costs.iter().sum::<u64>(),
    );
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if groups_needed(layer_costs, mid) <= k {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let cap = lo;
    let n = layer_costs.len();
    let mut groups = Vec::with_capacity(k);
    let mut start = 0;
    for g in 0..k {
        let left_after = k - g - 1;
        let mut end = start + 1;
        let mut acc = layer_costs[start];
        while end < n && n - (end + 1) >= left_after && acc + layer_costs[end] <= cap {
            acc += layer_costs[end];
            end += 1;
        }
        groups.push((start, end));
        start = end;
    }
    debug_assert_eq!(start, n);
    let group_costs: Vec<u64> = groups
        .iter()
        .map(|&(a, b)| layer_costs[a..b].iter().sum())
        .collect();
    let max_cost = group_costs.iter().copied().max().unwrap_or(0);
    debug_assert_eq!(max_cost, cap);
    Ok(StageAssignment {
        groups,
        group_costs,
        max_cost,
    })
}

/// Simulated idle fraction of an assignment, backward costing twice forward.
pub fn assignment_idle_fraction(
    a: &StageAssignment,
    p: usize,
    v: usize,
    n: usize,
) -> Result<Ratio<u64>> {
    let spec = PipelineSpec {
        p,
        v,
        n,
        stage_costs: a
            .group_costs
            .iter()
            .map(|&c| StageCost {
                fwd: c.max(1),
                bwd: 2 * c.max(1),
            })
            .collect(),
    };
    Ok(simulate_schedule(&spec)?.idle_fraction())
}
