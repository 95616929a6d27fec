use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::mask::CompressedMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CpStrategy {
    /// `cp` contiguous chunks of the packed sequence.
    Naive,
    /// `2*cp` chunks of the packed sequence; rank `r` takes `r` and `2cp-1-r`.
    Megatron2cp,
    /// `2*cp` chunks of every document; rank `r` takes `r` and `2cp-1-r` of each.
    BalancedSubseq,
}

impl CpStrategy {
    pub const ALL: [CpStrategy; 3] = [
        CpStrategy::Naive,
        CpStrategy::Megatron2cp,
        CpStrategy::BalancedSubseq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CpStrategy::Naive => "naive",
            CpStrategy::Megatron2cp => "megatron_2cp",
            CpStrategy::BalancedSubseq => "balanced_subseq",
        }
    }
}

impl fmt::Display for CpStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CpStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CpStrategy::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown CP strategy `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpPlan {
    pub cp: usize,
    pub strategy: CpStrategy,
    /// Global position ranges owned by each rank.
    pub chunks: Vec<Vec<Range<usize>>>,
    /// Attended (query, key) pairs per rank under the reset mask.
    pub workloads: Vec<u64>,
}

/// Splits `[start, start+len)` into `parts` ranges whose lengths differ by at
/// most one, longer ranges first.
fn split(start: usize, len: usize, parts: usize) -> Vec<Range<usize>> {
    let (base, extra) = (len / parts, len % parts);
    let mut out = Vec::with_capacity(parts);
    let mut at = start;
    for i in 0..parts {
        let l = base + usize::from(i < extra);
        out.push(at..at + l);
        at += l;
    }
    out
}

/// Assigns query positions to ranks and counts the causal within-document
/// key positions each rank attends to.
pub fn cp_partition(mask: &CompressedMask, cp: usize, strategy: CpStrategy) -> Result<CpPlan> {
    if cp == 0 {
        bail!(Argument, "cp must be at least 1");
    }
    let total = mask.total();
    let mut chunks = vec![Vec::new(); cp];
    match strategy {
        CpStrategy::Naive => {
            if total < cp {
                bail!(
                    Argument,
                    "{total} tokens cannot be split across cp={cp} ranks"
                );
            }
            for (r, c) in split(0, total, cp).into_iter().enumerate() {
                chunks[r].push(c);
            }
        }
        CpStrategy::Megatron2cp => {
            if total < 2 * cp {
                bail!(Argument, "{total} tokens cannot form {} chunks", 2 * cp);
            }
            let parts = split(0, total, 2 * cp);
            for r in 0..cp {
                chunks[r].push(parts[r].clone());
                chunks[r].push(parts[2 * cp - 1 - r].clone());
            }
        }
        CpStrategy::BalancedSubseq => {
            let shortest = mask.seq_lens().iter().copied().min().unwrap_or(0);
            if shortest < 2 * cp {
                bail!(
                    Argument,
                    "document of {shortest} tokens cannot form {} chunks",
                    2 * cp
                );
            }
            for (start, &len) in mask.starts().iter().zip(mask.seq_lens()) {
                let parts = split(*start, len, 2 * cp);
                for r in 0..cp {
                    chunks[r].push(parts[r].clone());
                    chunks[r].push(parts[2 * cp - 1 - r].clone());
                }
            }
        }
    }
    let local = mask.local_positions();
    let workloads = chunks
        .iter()
        .map(|rs| {
            rs.iter()
                .flat_map(|r| r.clone())
                .map(|i| local[i] as u64 + 1)
                .sum()
        })
        .collect();
    Ok(CpPlan {
        cp,
        strategy,
        chunks,
        workloads,
    })
}
