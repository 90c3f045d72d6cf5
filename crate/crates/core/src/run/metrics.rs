use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::hygrpo::StepReport;
use crate::policy::TaskKind;

/// One JSONL line: a task's aggregates at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub task: TaskKind,
    pub mean_group_reward: f64,
    pub loss_discrete: f64,
    pub loss_continuous: f64,
    pub kl: f64,
    pub clip_frac: f64,
    pub v_over_g: f64,
}

impl MetricRecord {
    pub fn from_report(report: &StepReport) -> Vec<Self> {
        report
            .tasks
            .iter()
            .map(|t| Self {
                step: report.step,
                task: t.task,
                mean_group_reward: t.mean_group_reward,
                loss_discrete: t.loss_discrete,
                loss_continuous: t.loss_continuous,
                kl: t.kl,
                clip_frac: t.clip_frac,
                v_over_g: t.v_over_g,
            })
            .collect()
    }
}

pub fn append_jsonl(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Keeps only the lines of steps before `step`.
pub fn truncate_jsonl(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path)?;
    let mut kept = String::with_capacity(text.len());
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: MetricRecord = serde_json::from_str(line)?;
        if r.step < step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept)?;
    Ok(())
}

/// `step,task,mean_reward` rows.
pub fn write_curve_csv(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut s = String::from("step,task,mean_reward\n");
    for r in records {
        s.push_str(&format!("{},{},{}\n", r.step, r.task, r.mean_group_reward));
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Mean of `mean_group_reward` for `task` over steps in `[from, to)`.
pub fn window_mean(records: &[MetricRecord], task: TaskKind, from: u64, to: u64) -> Option<f64> {
    let xs: Vec<f64> = records
        .iter()
        .filter(|r| r.task == task && r.step >= from && r.step < to)
        .map(|r| r.mean_group_reward)
        .collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}
