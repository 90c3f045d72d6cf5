//! Supervised warm start: teacher-forced token cross-entropy plus a pose
//! term, Gaussian negative log-likelihood or squared error depending on the
//! head.

use serde::{Deserialize, Serialize};

use crate::env::{Environment, TaskInstance, TaskMix};
use crate::error::{Error, Result};
use crate::math::{AdamW, AdamWConfig};
use crate::policy::{HybridPolicy, PoseHeadKind};
use crate::rng::{purpose, stream};
use crate::vocab::{TokenId, ANSWER_PREFIX, END, PERIOD, POSE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the pose term against the token cross-entropy.
    pub pose_weight: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            batch_size: 16,
            learning_rate: 1e-2,
            pose_weight: 1.0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config {
                key: "pretrain.batch_size".into(),
                reason: "must be positive".into(),
            });
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config {
                key: "pretrain.learning_rate".into(),
                reason: "must be finite and non-negative".into(),
            });
        }
        if !(self.pose_weight >= 0.0 && self.pose_weight.is_finite()) {
            return Err(Error::Config {
                key: "pretrain.pose_weight".into(),
                reason: "must be finite and non-negative".into(),
            });
        }
        Ok(())
    }
}

/// The response a perfect policy would give, END included.
pub fn target_tokens(task: &TaskInstance) -> Result<Vec<TokenId>> {
    if task.query.task.is_pose_task() {
        return Ok(vec![ANSWER_PREFIX, POSE, PERIOD, END]);
    }
    let mut t = task
        .gt_answer
        .clone()
        .ok_or_else(|| Error::Contract("qa task without an answer".into()))?;
    t.push(END);
    Ok(t)
}

/// Loss of one task and its gradient.
pub fn supervised_loss(
    policy: &HybridPolicy,
    task: &TaskInstance,
    pose_weight: f64,
) -> Result<(f64, Vec<f64>)> {
    let tokens = target_tokens(task)?;
    let pose = if task.query.task.is_pose_task() {
        Some(
            task.gt_pose
                .as_ref()
                .ok_or_else(|| Error::Contract("pose task without a pose".into()))?
                .as_slice(),
        )
    } else {
        None
    };
    let mut tape = policy.new_tape();
    let vars = policy.record(&mut tape, &task.query, &tokens, pose)?;
    let mut loss = tape.scale(vars.logp_discrete, -1.0);
    if let (Some(p), Some((mean, _)), Some(lp)) = (pose, vars.gaussian, vars.logp_continuous) {
        let pose_term = match policy.head_kind() {
            PoseHeadKind::Gaussian => tape.scale(lp, -1.0),
            PoseHeadKind::Deterministic => {
                let target = tape.constant(p.to_vec());
                let d = tape.sub(mean, target)?;
                let sq = tape.mul(d, d)?;
                tape.sum(sq)
            }
        };
        let weighted = tape.scale(pose_term, pose_weight);
        loss = tape.add(loss, weighted)?;
    }
    let value = tape.scalar(loss);
    Ok((value, tape.gradients(loss)?.into_params()))
}

/// Trains `policy` in place; returns the mean loss of each step.
pub fn pretrain(
    policy: &mut HybridPolicy,
    env: &Environment,
    mix: &TaskMix,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut opt = AdamW::new(policy.num_params(), AdamWConfig::default());
    let mut params = policy.flatten();
    let mut curve = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let mut rng = stream(seed, &[purpose::PRETRAIN, step]);
        let tasks = env.generate_batch(mix, cfg.batch_size, &mut rng)?;
        let mut grad = vec![0.0; params.len()];
        let mut total = 0.0;
        let n = tasks.len() as f64;
        for task in &tasks {
            let (l, g) = supervised_loss(policy, task, cfg.pose_weight)?;
            total += l / n;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b / n;
            }
        }
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("pretraining loss at step {step}")));
        }
        opt.step(&mut params, &grad, cfg.learning_rate)?;
        policy.restore(&params)?;
        curve.push(total);
    }
    Ok(curve)
}
