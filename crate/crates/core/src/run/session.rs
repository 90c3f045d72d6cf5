use std::path::{Path, PathBuf};

use log::{error, info};
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, RngState};
use super::config::RunConfig;
use super::eval::{evaluate, EvalReport};
use super::metrics::{append_jsonl, read_jsonl, truncate_jsonl, write_curve_csv, MetricRecord};
use crate::env::{Environment, TaskInstance};
use crate::error::{Error, Result};
use crate::hygrpo::{StepReport, Trainer};
use crate::policy::{HybridPolicy, PoseHeadKind};
use crate::pretrain::pretrain;
use crate::rewards::EnvScorer;
use crate::rng::{purpose, stream};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CURVE_FILE: &str = "curve.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const SUMMARY_FILE: &str = "summary.json";
const LOCK_FILE: &str = ".hygrpo.lock";

/// Builds the policy of `config` and applies the supervised warm start.
pub fn initial_policy(
    config: &RunConfig,
    env: &Environment,
    head: PoseHeadKind,
) -> Result<HybridPolicy> {
    let pcfg = crate::policy::PolicyConfig {
        head,
        ..config.policy.clone()
    };
    let mut policy = HybridPolicy::new(
        pcfg,
        &env.vocab,
        env.pose_dim(),
        Some(env.visual.clone()),
        config.seed,
    )?;
    pretrain(
        &mut policy,
        env,
        &config.env.mix,
        &config.pretrain,
        config.seed,
    )?;
    Ok(policy)
}

/// The policy stored in `ckpt`, built under the checkpoint's own config.
pub fn checkpoint_policy(ckpt: &Checkpoint, env: &Environment) -> Result<HybridPolicy> {
    let cfg = crate::policy::PolicyConfig {
        head: ckpt.head,
        ..ckpt.config.policy.clone()
    };
    let mut policy =
        HybridPolicy::new(cfg, &env.vocab, env.pose_dim(), Some(env.visual.clone()), 0)?;
    policy.restore(&ckpt.params)?;
    Ok(policy)
}

/// Training batch of step `step`; a pure function of the seed and the step.
pub fn step_tasks(config: &RunConfig, env: &Environment, step: u64) -> Result<Vec<TaskInstance>> {
    let mut rng = stream(config.seed, &[purpose::TASKS, step]);
    env.generate_batch(&config.env.mix, config.trainer.batch_size, &mut rng)
}

/// An in-memory training run.
#[derive(Clone, Debug)]
pub struct Run {
    config: RunConfig,
    env: Environment,
    trainer: Trainer,
}

impl Run {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let env = config.environment()?;
        let policy = initial_policy(&config, &env, config.policy.head)?;
        let trainer = Trainer::new(policy, config.trainer.clone(), config.seed)?;
        Ok(Self {
            config,
            env,
            trainer,
        })
    }

    pub fn from_checkpoint(config: RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        config.validate()?;
        let env = config.environment()?;
        let policy = HybridPolicy::new(
            crate::policy::PolicyConfig {
                head: ckpt.head,
                ..config.policy.clone()
            },
            &env.vocab,
            env.pose_dim(),
            Some(env.visual.clone()),
            config.seed,
        )?;
        let trainer = Trainer::from_state(
            policy,
            config.trainer.clone(),
            config.seed,
            &ckpt.params,
            ckpt.optimizer.clone(),
            ckpt.step,
            ckpt.reference.as_deref(),
        )?;
        Ok(Self {
            config,
            env,
            trainer,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn env(&self) -> &Environment {
        &self.env
    }

    pub fn trainer(&self) -> &Trainer {
        &self.trainer
    }

    pub fn policy(&self) -> &HybridPolicy {
        self.trainer.policy()
    }

    pub fn step(&self) -> u64 {
        self.trainer.step()
    }

    pub fn is_done(&self) -> bool {
        self.step() >= self.config.trainer.steps
    }

    pub fn train_step(&mut self) -> Result<StepReport> {
        let tasks = step_tasks(&self.config, &self.env, self.step())?;
        let scorer = EnvScorer::new(&self.env, self.config.reward.clone());
        self.trainer.train_step(&tasks, &scorer)
    }

    /// Runs to the configured step count and returns every metric record.
    pub fn run_to_end(&mut self) -> Result<Vec<MetricRecord>> {
        let mut out = Vec::new();
        while !self.is_done() {
            out.extend(MetricRecord::from_report(&self.train_step()?));
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            config_hash: self.config.hash(),
            step: self.step(),
            head: self.policy().head_kind(),
            params: self.policy().flatten(),
            optimizer: self.trainer.optimizer().clone(),
            reference: self.trainer.fixed_reference_params(),
            rng: RngState {
                seed: self.config.seed,
                next_step: self.step(),
            },
        }
    }

    pub fn evaluate(&self) -> Result<EvalReport> {
        let s = &self.config.run;
        evaluate(
            self.policy(),
            &self.env,
            &self.config.reward,
            s.eval_tasks,
            s.eval_group_size,
            self.config.seed,
        )
    }
}

/// Exclusive ownership of an output directory for the life of the value.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => {
                std::fs::write(&path, std::process::id().to_string())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Locked(dir.to_path_buf()))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions {
    /// Continue from the directory's checkpoint when one exists.
    pub resume: bool,
    /// Accept a checkpoint written under a different config.
    pub force: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub steps: u64,
    pub resumed_from: Option<u64>,
    pub final_metrics: Vec<MetricRecord>,
    pub eval: EvalReport,
}

/// Trains into `dir`: metrics JSONL, curve CSV, checkpoints and a summary.
pub fn train(config: &RunConfig, dir: &Path, opts: TrainOptions) -> Result<TrainSummary> {
    let _lock = DirLock::acquire(dir)?;
    let metrics = dir.join(METRICS_FILE);
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let (mut run, resumed_from) = if opts.resume && ckpt_path.exists() {
        let ckpt = Checkpoint::load(&ckpt_path)?;
        ckpt.check_config(config, opts.force)?;
        truncate_jsonl(&metrics, ckpt.step)?;
        info!("resuming from step {}", ckpt.step);
        (
            Run::from_checkpoint(config.clone(), &ckpt)?,
            Some(ckpt.step),
        )
    } else {
        if metrics.exists() {
            std::fs::remove_file(&metrics)?;
        }
        let run = Run::new(config.clone())?;
        run.checkpoint().save(&ckpt_path)?;
        (run, None)
    };
    std::fs::File::options()
        .create(true)
        .append(true)
        .open(&metrics)?;
    let every = config.run.checkpoint_every;
    let mut last = Vec::new();
    while !run.is_done() {
        let report = match run.train_step() {
            Ok(r) => r,
            Err(e) => {
                error!("step {} failed: {e}; last good checkpoint kept", run.step());
                return Err(e);
            }
        };
        last = MetricRecord::from_report(&report);
        append_jsonl(&metrics, &last)?;
        if let Some(m) = last.first() {
            info!(
                "step {} lr {:.3e} loss {:.4e} ({} reward {:.4})",
                report.step, report.lr, report.loss, m.task, m.mean_group_reward
            );
        }
        if (every > 0 && run.step() % every == 0) || run.is_done() {
            run.checkpoint().save(&ckpt_path)?;
        }
    }
    let all = read_jsonl(&metrics)?;
    write_curve_csv(&dir.join(CURVE_FILE), &all)?;
    if last.is_empty() {
        let final_step = all.last().map(|r| r.step);
        last = all
            .into_iter()
            .filter(|r| Some(r.step) == final_step)
            .collect();
    }
    let summary = TrainSummary {
        config_hash: config.hash(),
        steps: run.step(),
        resumed_from,
        final_metrics: last,
        eval: run.evaluate()?,
    };
    std::fs::write(
        dir.join(SUMMARY_FILE),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}
