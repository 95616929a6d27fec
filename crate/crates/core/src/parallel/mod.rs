//! Pipeline schedules, stage balancing and context-parallel partitioning.

pub mod balance;
pub mod cp;
pub mod pipeline;

pub use balance::{assignment_idle_fraction, balance_stages, StageAssignment};
pub use cp::{cp_partition, CpPlan, CpStrategy};
pub use pipeline::{
    bubble_ratio_1f1b, bubble_ratio_1f1b_exact, bubble_ratio_interleaved,
    bubble_ratio_interleaved_exact, simulate_schedule, Event, EventKind, PipelineSpec,
    ScheduleTimeline, StageCost,
};
