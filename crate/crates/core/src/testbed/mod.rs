//! Synthetic planning tasks, a point-mass world with receding-horizon
//! execution, and paired full-versus-cached evaluation.

mod paired;
mod rollout;
mod task;
mod world;

pub use paired::{paired_eval, summarize, DecisionStats, PairedDecision, PairedOptions, PairedOutcome, SummarySpec};
pub use rollout::{
    rollout_closed_loop, summarize_episodes, DecisionRecord, EpisodeReport, EscalationFeatures, Planner, PlannerKind,
};
pub use task::{tape_seeds, GaussianTrajectoryTask};
pub use world::{feasibility_check, to_world, Obstacle, Point, PointMassWorld, WaypointPrior, SEGMENT_INTERPOLANTS};
