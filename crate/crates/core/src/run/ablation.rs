use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::eval::{evaluate, EvalReport};
use super::metrics::{window_mean, write_curve_csv, MetricRecord};
use super::session::{initial_policy, Run};
use crate::error::{Error, Result};
use crate::hygrpo::UpdateMode;
use crate::policy::{PoseHeadKind, TaskKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Regression head trained by squared error, no reinforcement stage.
    DeterministicHead,
    /// Gaussian head trained by likelihood, no reinforcement stage.
    DistributionalHead,
    /// Gaussian head, reinforcement on the token branch only.
    GrpoDiscreteOnly,
    /// Gaussian head, reinforcement on both branches.
    Hygrpo,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::DeterministicHead,
        Variant::DistributionalHead,
        Variant::GrpoDiscreteOnly,
        Variant::Hygrpo,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::DeterministicHead => "deterministic_head",
            Variant::DistributionalHead => "distributional_head",
            Variant::GrpoDiscreteOnly => "grpo_discrete_only",
            Variant::Hygrpo => "hygrpo",
        }
    }

    /// Row label in the summary table.
    pub fn row_label(self) -> &'static str {
        match self {
            Variant::DeterministicHead => "baseline",
            Variant::DistributionalHead => "+dist",
            Variant::GrpoDiscreteOnly => "+dist +rft (discrete only)",
            Variant::Hygrpo => "+dist +rft",
        }
    }

    pub fn head(self) -> PoseHeadKind {
        match self {
            Variant::DeterministicHead => PoseHeadKind::Deterministic,
            _ => PoseHeadKind::Gaussian,
        }
    }

    pub fn update_mode(self) -> Option<UpdateMode> {
        match self {
            Variant::GrpoDiscreteOnly => Some(UpdateMode::DiscreteOnly),
            Variant::Hygrpo => Some(UpdateMode::Hybrid),
            _ => None,
        }
    }

    /// The run config this variant trains under.
    pub fn config(self, base: &RunConfig, seed: u64) -> RunConfig {
        let mut c = base.clone();
        c.seed = seed;
        c.policy.head = self.head();
        if let Some(m) = self.update_mode() {
            c.trainer.mode = m;
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config {
                key: "variant".into(),
                reason: format!(
                    "unknown variant `{s}`, expected one of {}",
                    Variant::ALL.map(Variant::as_str).join(", ")
                ),
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub seed: u64,
    /// Training curve; empty for variants without a reinforcement stage.
    pub curve: Vec<MetricRecord>,
    pub eval: EvalReport,
}

impl VariantResult {
    /// Mean training reward over the last `window` steps, falling back to
    /// the evaluation reward for variants that never trained.
    pub fn final_reward(&self, task: TaskKind, window: u64) -> f64 {
        let end = self.curve.iter().map(|r| r.step + 1).max().unwrap_or(0);
        window_mean(&self.curve, task, end.saturating_sub(window), end)
            .unwrap_or_else(|| self.eval_reward(task))
    }

    pub fn eval_reward(&self, task: TaskKind) -> f64 {
        self.eval.get(task).map_or(0.0, |t| t.mean_group_reward)
    }
}

pub fn run_variant(base: &RunConfig, variant: Variant, seed: u64) -> Result<VariantResult> {
    let config = variant.config(base, seed);
    config.validate()?;
    let (curve, eval) = if variant.update_mode().is_some() {
        let mut run = Run::new(config)?;
        let curve = run.run_to_end()?;
        (curve, run.evaluate()?)
    } else {
        let env = config.environment()?;
        let policy = initial_policy(&config, &env, variant.head())?;
        let s = &config.run;
        let eval = evaluate(
            &policy,
            &env,
            &config.reward,
            s.eval_tasks,
            s.eval_group_size,
            seed,
        )?;
        (Vec::new(), eval)
    };
    info!("{variant} seed {seed} done");
    Ok(VariantResult {
        variant,
        seed,
        curve,
        eval,
    })
}

/// One row of the summary table: evaluation rewards averaged over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: Variant,
    pub label: String,
    pub text2pose_semantic: f64,
    pub image2pose_joint: f64,
    pub qa: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub rows: Vec<SummaryRow>,
    pub results: Vec<VariantResult>,
}

impl AblationSummary {
    pub fn from_results(results: Vec<VariantResult>) -> Self {
        let mut variants: Vec<Variant> = results.iter().map(|r| r.variant).collect();
        variants.sort();
        variants.dedup();
        let rows = variants
            .into_iter()
            .map(|v| {
                let rs: Vec<&VariantResult> = results.iter().filter(|r| r.variant == v).collect();
                let mean = |k: TaskKind| {
                    rs.iter().map(|r| r.eval_reward(k)).sum::<f64>() / rs.len() as f64
                };
                SummaryRow {
                    variant: v,
                    label: v.row_label().into(),
                    text2pose_semantic: mean(TaskKind::Text2Pose),
                    image2pose_joint: mean(TaskKind::Image2Pose),
                    qa: mean(TaskKind::Qa),
                    seeds: rs.len(),
                }
            })
            .collect();
        Self { rows, results }
    }

    pub fn result(&self, variant: Variant, seed: u64) -> Option<&VariantResult> {
        self.results
            .iter()
            .find(|r| r.variant == variant && r.seed == seed)
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "| {:<28} | {:>17} | {:>16} | {:>8} |\n|{}|{}|{}|{}|\n",
            "variant",
            "text2pose R_sem",
            "image2pose R_joint",
            "qa R_d",
            "-".repeat(30),
            "-".repeat(19),
            "-".repeat(20),
            "-".repeat(10)
        );
        for r in &self.rows {
            s.push_str(&format!(
                "| {:<28} | {:>17.4} | {:>18.4} | {:>8.4} |\n",
                format!("{} ({})", r.label, r.variant),
                r.text2pose_semantic,
                r.image2pose_joint,
                r.qa
            ));
        }
        s
    }
}

/// Runs every variant under every seed and writes curves, the table and a
/// JSON summary into `dir`.
pub fn ablate(
    base: &RunConfig,
    variants: &[Variant],
    seeds: &[u64],
    dir: &Path,
) -> Result<AblationSummary> {
    let _lock = super::session::DirLock::acquire(dir)?;
    let curves = dir.join("curves");
    std::fs::create_dir_all(&curves)?;
    let mut results = Vec::new();
    for &v in variants {
        for &seed in seeds {
            let r = run_variant(base, v, seed)?;
            if !r.curve.is_empty() {
                write_curve_csv(&curves.join(format!("{v}_seed{seed}.csv")), &r.curve)?;
            }
            results.push(r);
        }
    }
    let summary = AblationSummary::from_results(results);
    std::fs::write(dir.join("summary.md"), summary.table())?;
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}
