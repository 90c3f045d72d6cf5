use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::Result;
use crate::policy::{HybridPolicy, TaskKind};
use crate::rewards::{EnvScorer, RewardConfig, Scorer};
use crate::rng::{purpose, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTask {
    pub task: TaskKind,
    /// Same statistic as the training curve: mean `R_c` over V-set members
    /// for pose tasks, mean `R_d` for qa.
    pub mean_group_reward: f64,
    pub format_rate: f64,
    pub v_over_g: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: Vec<EvalTask>,
}

impl EvalReport {
    pub fn get(&self, task: TaskKind) -> Option<&EvalTask> {
        self.tasks.iter().find(|t| t.task == task)
    }
}

/// Scores `group_size` samples on each of `per_task` held-out tasks of every
/// kind. The task set depends only on `seed`.
pub fn evaluate(
    policy: &HybridPolicy,
    env: &Environment,
    reward: &RewardConfig,
    per_task: usize,
    group_size: usize,
    seed: u64,
) -> Result<EvalReport> {
    let scorer = EnvScorer::new(env, reward.clone());
    let mut tasks = Vec::new();
    for (k, kind) in TaskKind::ALL.into_iter().enumerate() {
        let mut gen = stream(seed, &[purpose::EVAL, 0, k as u64]);
        let (mut sum, mut n, mut formatted, mut v) = (0.0, 0usize, 0usize, 0usize);
        for i in 0..per_task {
            let task = env.generate_task(kind, &mut gen)?;
            for c in 0..group_size {
                let mut rng = stream(seed, &[purpose::EVAL, 1, k as u64, i as u64, c as u64]);
                let resp = policy.sample(&task.query, &mut rng)?;
                let r = scorer.score(&task, &resp)?;
                if r.r_format == Some(1.0) {
                    formatted += 1;
                }
                if kind.is_pose_task() {
                    if r.in_v_set() {
                        sum += r.r_continuous.unwrap_or(0.0);
                        n += 1;
                        v += 1;
                    }
                } else {
                    sum += r.r_discrete;
                    n += 1;
                }
            }
        }
        let total = (per_task * group_size).max(1) as f64;
        tasks.push(EvalTask {
            task: kind,
            mean_group_reward: if n == 0 { 0.0 } else { sum / n as f64 },
            format_rate: formatted as f64 / total,
            v_over_g: v as f64 / total,
        });
    }
    Ok(EvalReport { tasks })
}
