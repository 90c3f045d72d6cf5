use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use super::objective::{candidate_loss, summarize, CandidateTerms, GroupBatch, UpdateMode};
use crate::env::TaskInstance;
use crate::error::{Error, Result};
use crate::math::{AdamW, AdamWConfig, CosineSchedule, Tape};
use crate::policy::{
    Evaluation, HybridPolicy, PolicySnapshot, PoseHeadKind, ResponseVars, TaskKind,
};
use crate::rewards::Scorer;
use crate::rng::{purpose, stream};

/// When the reference policy is refreshed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// The reference is the policy that sampled the current batch.
    EveryStep,
    /// The reference stays at the initial policy.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub group_size: usize,
    pub clip_eps_discrete: f64,
    pub clip_eps_continuous: f64,
    pub beta_discrete: f64,
    pub beta_continuous: f64,
    pub eps_std: f64,
    pub learning_rate: f64,
    /// Floor of the cosine schedule.
    pub min_learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub reference: ReferenceMode,
    pub mode: UpdateMode,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_eps_discrete: 0.2,
            clip_eps_continuous: 0.2,
            beta_discrete: 0.04,
            beta_continuous: 0.04,
            eps_std: 1e-6,
            learning_rate: 3e-3,
            min_learning_rate: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            batch_size: 16,
            steps: 1000,
            reference: ReferenceMode::EveryStep,
            mode: UpdateMode::Hybrid,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Config {
                key: format!("trainer.{key}"),
                reason: reason.into(),
            })
        };
        if self.group_size < 2 {
            return bad("group_size", "must be at least 2");
        }
        for (key, eps) in [
            ("clip_eps_discrete", self.clip_eps_discrete),
            ("clip_eps_continuous", self.clip_eps_continuous),
        ] {
            if !(eps > 0.0 && eps < 1.0) {
                return bad(key, "must lie in (0, 1)");
            }
        }
        for (key, beta) in [
            ("beta_discrete", self.beta_discrete),
            ("beta_continuous", self.beta_continuous),
        ] {
            if !(beta >= 0.0 && beta.is_finite()) {
                return bad(key, "must be finite and non-negative");
            }
        }
        if !(self.eps_std > 0.0) {
            return bad("eps_std", "must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be finite and non-negative");
        }
        if !(self.min_learning_rate >= 0.0 && self.min_learning_rate <= self.learning_rate) {
            return bad("min_learning_rate", "must lie in [0, learning_rate]");
        }
        if !(self.adam_beta1 >= 0.0 && self.adam_beta1 < 1.0) {
            return bad("adam_beta1", "must lie in [0, 1)");
        }
        if !(self.adam_beta2 >= 0.0 && self.adam_beta2 < 1.0) {
            return bad("adam_beta2", "must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps", "must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        Ok(())
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule {
            base_lr: self.learning_rate,
            min_lr: self.min_learning_rate,
            total_steps: self.steps,
        }
    }

    pub fn adam(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Per-task aggregates of one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: TaskKind,
    /// Mean `R_c` over V-set members for pose tasks, mean `R_d` for qa.
    pub mean_group_reward: f64,
    pub loss_discrete: f64,
    pub loss_continuous: f64,
    pub kl: f64,
    pub clip_frac: f64,
    pub v_over_g: f64,
    pub groups: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub tasks: Vec<TaskMetrics>,
    pub loss: f64,
    /// Every group had zero-variance rewards; parameters were left alone.
    pub degenerate: bool,
    pub updated: bool,
    pub skipped_groups: usize,
    pub dropped_candidates: usize,
    pub max_factorization_error: f64,
    pub grad_norm: f64,
}

struct Sampled {
    batch: GroupBatch,
    tapes: Vec<Tape>,
    vars: Vec<ResponseVars>,
}

/// Owns the policy, the reference and the optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainerConfig,
    policy: HybridPolicy,
    reference: Option<PolicySnapshot>,
    optimizer: AdamW,
    step: u64,
    seed: u64,
}

impl Trainer {
    pub fn new(policy: HybridPolicy, config: TrainerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if policy.head_kind() != PoseHeadKind::Gaussian {
            return Err(Error::Config {
                key: "policy.head".into(),
                reason: "reinforcement fine-tuning needs the gaussian head".into(),
            });
        }
        let reference = match config.reference {
            ReferenceMode::EveryStep => None,
            ReferenceMode::Fixed => Some(policy.snapshot()),
        };
        let optimizer = AdamW::new(policy.num_params(), config.adam());
        Ok(Self {
            config,
            policy,
            reference,
            optimizer,
            step: 0,
            seed,
        })
    }

    /// Rebuilds a trainer from saved state.
    pub fn from_state(
        mut policy: HybridPolicy,
        config: TrainerConfig,
        seed: u64,
        params: &[f64],
        optimizer: AdamW,
        step: u64,
        reference_params: Option<&[f64]>,
    ) -> Result<Self> {
        policy.restore(params)?;
        let mut t = Self::new(policy, config, seed)?;
        if optimizer.m.len() != t.policy.num_params() || optimizer.v.len() != t.policy.num_params()
        {
            return Err(Error::Checkpoint(
                "optimizer state has the wrong size".into(),
            ));
        }
        t.optimizer = AdamW {
            config: t.config.adam(),
            ..optimizer
        };
        t.step = step;
        t.reference = match (t.config.reference, reference_params) {
            (ReferenceMode::EveryStep, _) => None,
            (ReferenceMode::Fixed, Some(r)) => {
                let mut p = t.policy.clone();
                p.restore(r)?;
                Some(p.snapshot())
            }
            (ReferenceMode::Fixed, None) => {
                return Err(Error::Checkpoint(
                    "fixed reference parameters missing".into(),
                ))
            }
        };
        Ok(t)
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn policy(&self) -> &HybridPolicy {
        &self.policy
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.optimizer
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The policy ratios and KL are measured against at the next step.
    pub fn reference(&self) -> PolicySnapshot {
        match &self.reference {
            Some(r) => r.clone(),
            None => self.policy.snapshot(),
        }
    }

    /// Parameters of a fixed reference, if one is kept.
    pub fn fixed_reference_params(&self) -> Option<Vec<f64>> {
        self.reference.as_ref().map(|r| r.flatten())
    }

    fn sample_group(
        &self,
        index: usize,
        task: &TaskInstance,
        scorer: &dyn Scorer,
        dropped: &mut usize,
    ) -> Result<Option<Sampled>> {
        let g = self.config.group_size;
        let (mut tapes, mut vars, mut cands, mut rewards, mut refs) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for c in 0..g {
            let mut rng = stream(
                self.seed,
                &[purpose::CANDIDATE, self.step, index as u64, c as u64],
            );
            let mut tape = self.policy.new_tape();
            let (resp, v) = self
                .policy
                .sample_on_tape(&mut tape, &task.query, &mut rng)?;
            let finite = resp.logp_discrete.is_finite()
                && resp.logp_continuous.is_none_or(f64::is_finite)
                && resp.pose.as_ref().is_none_or(|p| p.is_finite());
            let reference = match &self.reference {
                None => Evaluation::from_tape(&tape, &v),
                Some(r) => r.evaluate(&task.query, &resp),
            };
            let reference = match reference {
                Ok(r) if finite => r,
                _ => {
                    warn!(
                        "step {}: dropping candidate {c} of group {index}",
                        self.step
                    );
                    *dropped += 1;
                    continue;
                }
            };
            rewards.push(scorer.score(task, &resp)?);
            cands.push(resp);
            refs.push(reference);
            tapes.push(tape);
            vars.push(v);
        }
        if cands.len() < 2 {
            warn!(
                "step {}: group {index} has fewer than 2 candidates",
                self.step
            );
            return Ok(None);
        }
        let batch = GroupBatch::new(task.clone(), cands, rewards, refs, self.config.eps_std)?;
        Ok(Some(Sampled { batch, tapes, vars }))
    }

    /// One iteration: sample, score, normalise, one optimizer update.
    pub fn train_step(
        &mut self,
        tasks: &[TaskInstance],
        scorer: &dyn Scorer,
    ) -> Result<StepReport> {
        let mut dropped = 0;
        let mut groups = Vec::with_capacity(tasks.len());
        let mut skipped = 0;
        for (i, task) in tasks.iter().enumerate() {
            match self.sample_group(i, task, scorer, &mut dropped)? {
                Some(s) => groups.push(s),
                None => skipped += 1,
            }
        }
        if groups.is_empty() && dropped > 0 {
            return Err(Error::NonFinite(format!(
                "every candidate at step {} had a non-finite log-probability",
                self.step
            )));
        }
        let n = groups.len().max(1) as f64;
        let mut gradient = vec![0.0; self.policy.num_params()];
        let mut loss = 0.0;
        let mut max_fact: f64 = 0.0;
        let mut all_terms: Vec<Vec<CandidateTerms>> = Vec::with_capacity(groups.len());
        for s in &mut groups {
            let b = &s.batch;
            let mut terms = Vec::with_capacity(b.group_size());
            for i in 0..b.group_size() {
                let tape = &mut s.tapes[i];
                let (l, t) = candidate_loss(
                    tape,
                    &s.vars[i],
                    &b.reference[i],
                    b.f_hat[i],
                    b.delta_hat[i],
                    b.group_size(),
                    b.v_count(),
                    1.0 / n,
                    &self.config,
                )?;
                loss += tape.scalar(l);
                for (acc, g) in gradient.iter_mut().zip(tape.gradients(l)?.params()) {
                    *acc += g;
                }
                max_fact = max_fact.max(t.ratios.factorization_error);
                terms.push(t);
            }
            all_terms.push(terms);
        }
        if !loss.is_finite() || !gradient.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite(format!("loss at step {}", self.step)));
        }

        let degenerate = groups.iter().all(|s| s.batch.is_degenerate());
        if degenerate {
            warn!(
                "step {}: every group is degenerate, skipping update",
                self.step
            );
        }
        let lr = self.config.schedule().lr(self.step);
        let grad_norm = gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
        let updated = !degenerate && !groups.is_empty();
        if updated {
            let mut params = self.policy.flatten();
            let frozen = match self.config.mode {
                UpdateMode::DiscreteOnly => {
                    Some(params[self.policy.layout().pose_head_range()].to_vec())
                }
                UpdateMode::Hybrid => None,
            };
            self.optimizer.step(&mut params, &gradient, lr)?;
            if let Some(f) = frozen {
                params[self.policy.layout().pose_head_range()].copy_from_slice(&f);
            }
            self.policy.restore(&params)?;
        }

        let tasks = task_metrics(&groups, &all_terms);
        let report = StepReport {
            step: self.step,
            lr,
            tasks,
            loss,
            degenerate,
            updated,
            skipped_groups: skipped,
            dropped_candidates: dropped,
            max_factorization_error: max_fact,
            grad_norm,
        };
        self.step += 1;
        Ok(report)
    }
}

fn task_metrics(groups: &[Sampled], terms: &[Vec<CandidateTerms>]) -> Vec<TaskMetrics> {
    #[derive(Default)]
    struct Acc {
        reward_sum: f64,
        reward_n: usize,
        ld: f64,
        lc: f64,
        kl: f64,
        clipped: usize,
        cands: usize,
        v: usize,
        groups: usize,
    }
    let mut by_task: BTreeMap<TaskKind, Acc> = BTreeMap::new();
    for (s, t) in groups.iter().zip(terms) {
        let b = &s.batch;
        let kind = b.task.query.task;
        let a = by_task.entry(kind).or_default();
        if kind.is_pose_task() {
            for (r, d) in b.rewards.iter().zip(&b.delta_hat) {
                if d.is_some() {
                    a.reward_sum += r.r_continuous.unwrap_or(0.0);
                    a.reward_n += 1;
                }
            }
        } else {
            a.reward_sum += b.rewards.iter().map(|r| r.r_discrete).sum::<f64>();
            a.reward_n += b.group_size();
        }
        let sum = summarize(t, b.v_count());
        a.ld -= sum.surrogate_d;
        a.lc -= sum.surrogate_c;
        a.kl += sum.kl;
        a.clipped += t.iter().filter(|c| c.clipped).count();
        a.cands += b.group_size();
        a.v += b.v_count();
        a.groups += 1;
    }
    by_task
        .into_iter()
        .map(|(task, a)| {
            let g = a.groups as f64;
            TaskMetrics {
                task,
                mean_group_reward: if a.reward_n == 0 {
                    0.0
                } else {
                    a.reward_sum / a.reward_n as f64
                },
                loss_discrete: a.ld / g,
                loss_continuous: a.lc / g,
                kl: a.kl / g,
                clip_frac: a.clipped as f64 / a.cands as f64,
                v_over_g: a.v as f64 / a.cands as f64,
                groups: a.groups,
            }
        })
        .collect()
}
