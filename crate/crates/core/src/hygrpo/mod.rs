//! Group-relative policy optimisation over hybrid token/pose responses.
//!
//! Each query gets a group of sampled candidates. Rewards are z-scored within
//! the group: the discrete reward over every candidate, the continuous reward
//! over the candidates that carry a well-formed pose (the V-set). The update
//! maximises a clipped surrogate on each branch's importance ratio minus KL
//! penalties against a reference policy.

mod advantage;
mod bandit;
mod objective;
mod trainer;

pub use advantage::{group_normalize, mean_popstd};
pub use bandit::GaussianPeakBandit;
pub use objective::{
    clipped_surrogate, hygrpo_loss, importance_ratios, ratios_from_logps, CandidateTerms,
    GroupBatch, LossOutput, Ratios, UpdateMode,
};
pub use trainer::{ReferenceMode, StepReport, TaskMetrics, Trainer, TrainerConfig};

#[cfg(test)]
mod tests;
