use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use hygrpo_core::env::{import_tasks, Environment, TaskInstance};
use hygrpo_core::policy::{HybridPolicy, TaskKind};
use hygrpo_core::rewards::{EnvScorer, Scorer};
use hygrpo_core::rng::{purpose, stream};
use hygrpo_core::run::{
    ablate, checkpoint_policy, evaluate, train, Checkpoint, RunConfig, TrainOptions, Variant,
};

const LOG_ENV: &str = "HYGRPO_LOG_LEVEL";

#[derive(Parser)]
#[command(
    name = "hygrpo",
    version,
    about = "Hybrid token and pose policy optimisation on synthetic tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config; defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training steps, overriding `trainer.steps`.
    #[arg(long)]
    steps: Option<u64>,
    /// Output directory, overriding `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Warm-start and train one policy.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Resume even if the checkpoint was written under another config.
        #[arg(long)]
        force: bool,
    },
    /// Train every variant under shared seeds and compare them.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Variant to run; repeat for several. Defaults to `ablation.variants`.
        #[arg(long = "variant")]
        variants: Vec<String>,
    },
    /// Sample one response and score it.
    Sample {
        /// Checkpoint to sample from; repeat to follow one query across checkpoints.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use the checkpoint even if `--config` differs from its own.
        #[arg(long)]
        force: bool,
        /// Sampling seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Task kind of a freshly generated query.
        #[arg(long, default_value = "text2pose")]
        task: TaskKind,
        /// Seed of the generated query.
        #[arg(long, default_value_t = 0)]
        task_seed: u64,
        /// JSONL task file; overrides `--task`.
        #[arg(long)]
        tasks_file: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Write one pose record per checkpoint to this JSONL file.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on held-out tasks.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        /// Seed of the evaluation set; defaults to the run seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn init_logging() -> Result<()> {
    let level = std::env::var(LOG_ENV).unwrap_or_else(|_| "info".into());
    if !["error", "warn", "info", "debug"].contains(&level.as_str()) {
        bail!("{LOG_ENV} must be one of error, warn, info, debug (got `{level}`)");
    }
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .init();
    Ok(())
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(n) = common.steps {
        cfg.trainer.steps = n;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs/default"))
}

/// Loads a checkpoint and the config it should run under.
fn open_checkpoint(
    path: &Path,
    config: Option<&Path>,
    force: bool,
) -> Result<(Checkpoint, RunConfig)> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let cfg = match config {
        Some(p) => {
            let cfg = RunConfig::load(p)?;
            ckpt.check_config(&cfg, force).context(
                "checkpoint was written under a different config (pass --force to use it anyway)",
            )?;
            cfg
        }
        None => ckpt.config.clone(),
    };
    Ok((ckpt, cfg))
}

fn pick_task(
    env: &Environment,
    kind: TaskKind,
    task_seed: u64,
    file: Option<&Path>,
    index: usize,
) -> Result<TaskInstance> {
    match file {
        Some(p) => {
            let tasks = import_tasks(p)?;
            let n = tasks.len();
            tasks
                .into_iter()
                .nth(index)
                .with_context(|| format!("index {index} out of range ({n} tasks)"))
        }
        None => Ok(env.generate_task(kind, &mut stream(task_seed, &[purpose::SAMPLE, 0]))?),
    }
}

fn fmt_vec(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

fn show_sample(
    env: &Environment,
    policy: &HybridPolicy,
    cfg: &RunConfig,
    task: &TaskInstance,
    seed: u64,
) -> Result<serde_json::Value> {
    let resp = policy.sample(&task.query, &mut stream(seed, &[purpose::SAMPLE, 1]))?;
    let scorer = EnvScorer::new(env, cfg.reward.clone());
    let reward = scorer.score(task, &resp)?;
    println!("task:    {}", task.query.task);
    println!(
        "prompt:  {}",
        env.vocab.detokenize(&task.query.prompt_tokens)
    );
    println!("answer:  {}", env.vocab.detokenize(&resp.tokens));
    if let Some(p) = &resp.pose {
        println!("pose:    {}", fmt_vec(p));
        for (j, x) in env.fk.forward(p)?.iter().enumerate() {
            println!("joint {j}: {}", fmt_vec(x));
        }
    }
    println!(
        "logp:    discrete {:.4} continuous {:?}",
        resp.logp_discrete, resp.logp_continuous
    );
    println!("rewards: {}", serde_json::to_string(&reward)?);
    Ok(serde_json::json!({
        "tokens": resp.tokens,
        "pose": resp.pose.as_ref().map(|p| p.to_vec()),
        "rewards": reward,
    }))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            common,
            resume,
            force,
        } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&cfg);
            let summary = train(&cfg, &dir, TrainOptions { resume, force })?;
            info!("wrote {}", dir.display());
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Ablate { common, variants } => {
            let cfg = load_config(&common)?;
            let variants: Vec<Variant> = if variants.is_empty() {
                cfg.ablation.variants.clone()
            } else {
                variants
                    .iter()
                    .map(|v| v.parse())
                    .collect::<Result<_, _>>()?
            };
            let seeds = match common.seed {
                Some(s) => vec![s],
                None => cfg.ablation.seeds.clone(),
            };
            let dir = out_dir(&cfg);
            let summary = ablate(&cfg, &variants, &seeds, &dir)?;
            print!("{}", summary.table());
        }
        Command::Sample {
            checkpoints,
            config,
            force,
            seed,
            task,
            task_seed,
            tasks_file,
            index,
            trajectory,
        } => {
            let mut records = Vec::new();
            for path in &checkpoints {
                let (ckpt, cfg) = open_checkpoint(path, config.as_deref(), force)?;
                let env = cfg.environment()?;
                let policy = checkpoint_policy(&ckpt, &env)?;
                let t = pick_task(&env, task, task_seed, tasks_file.as_deref(), index)?;
                println!("checkpoint {} (step {})", path.display(), ckpt.step);
                let mut rec = show_sample(&env, &policy, &cfg, &t, seed)?;
                rec["checkpoint"] = path.display().to_string().into();
                rec["step"] = ckpt.step.into();
                records.push(rec);
            }
            if let Some(p) = trajectory {
                let lines: Vec<String> = records.iter().map(|r| r.to_string()).collect();
                std::fs::write(&p, lines.join("\n") + "\n")?;
            }
        }
        Command::Eval {
            checkpoint,
            config,
            force,
            seed,
        } => {
            let (ckpt, cfg) = open_checkpoint(&checkpoint, config.as_deref(), force)?;
            let env = cfg.environment()?;
            let policy = checkpoint_policy(&ckpt, &env)?;
            let s = &cfg.run;
            let report = evaluate(
                &policy,
                &env,
                &cfg.reward,
                s.eval_tasks,
                s.eval_group_size,
                seed.unwrap_or(cfg.seed),
            )?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_logging() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
