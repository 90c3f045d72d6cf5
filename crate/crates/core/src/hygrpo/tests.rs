use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::env::{EnvConfig, Environment, TaskInstance, TaskMix};
use crate::policy::{
    sample_pose, HybridPolicy, HybridResponse, PolicyConfig, PoseHeadKind, TaskKind,
};
use crate::vocab::{TokenId, ANSWER_PREFIX, END, PERIOD, POSE};

const TEMPLATE: [TokenId; 4] = [ANSWER_PREFIX, POSE, PERIOD, END];
use crate::rewards::{EnvScorer, RewardBreakdown, RewardConfig, Scorer};

fn env() -> Environment {
    Environment::new(EnvConfig::default()).unwrap()
}

fn small_config() -> PolicyConfig {
    PolicyConfig {
        embed_dim: 4,
        state_dim: 12,
        token_hidden: 12,
        pose_hidden: 12,
        max_len: 6,
        ..PolicyConfig::default()
    }
}

fn policy(env: &Environment, seed: u64) -> HybridPolicy {
    HybridPolicy::new(
        small_config(),
        &env.vocab,
        env.pose_dim(),
        Some(env.visual.clone()),
        seed,
    )
    .unwrap()
}

fn perturbed(p: &HybridPolicy, scale: f64, seed: u64) -> HybridPolicy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat: Vec<f64> = p
        .flatten()
        .iter()
        .map(|x| x + scale * rng.random_range(-1.0..1.0))
        .collect();
    let mut q = p.clone();
    q.restore(&flat).unwrap();
    q
}

/// Samples from `sampler`, takes reference values from `reference`.
fn batch(
    sampler: &HybridPolicy,
    reference: &HybridPolicy,
    task: &TaskInstance,
    scorer: &dyn Scorer,
    g: usize,
    seed: u64,
) -> GroupBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cands: Vec<_> = (0..g)
        .map(|_| sampler.sample(&task.query, &mut rng).unwrap())
        .collect();
    let rewards = cands
        .iter()
        .map(|c| scorer.score(task, c).unwrap())
        .collect();
    let refs = cands
        .iter()
        .map(|c| reference.evaluate(&task.query, c).unwrap())
        .collect();
    GroupBatch::new(task.clone(), cands, rewards, refs, 1e-6).unwrap()
}

/// A pose-task group mixing template answers, whose poses come from the pose
/// head, with free samples. Rewards vary on both branches.
fn rich_batch(env: &Environment, pi: &HybridPolicy, kind: TaskKind) -> GroupBatch {
    let scorer = EnvScorer::new(env, RewardConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(kind as u64);
    let task = env.generate_task(kind, &mut rng).unwrap();
    let cands: Vec<HybridResponse> = (0..12)
        .map(|i| {
            if i % 3 == 2 {
                return pi.sample(&task.query, &mut rng).unwrap();
            }
            let g = pi.pose_head(&task.query, &TEMPLATE).unwrap();
            HybridResponse {
                tokens: TEMPLATE.to_vec(),
                pose: Some(sample_pose(&g, &mut rng)),
                logp_discrete: 0.0,
                logp_continuous: Some(0.0),
                truncated: false,
            }
        })
        .collect();
    let rewards = cands
        .iter()
        .map(|c| scorer.score(&task, c).unwrap())
        .collect();
    let refs = cands
        .iter()
        .map(|c| pi.evaluate(&task.query, c).unwrap())
        .collect();
    let b = GroupBatch::new(task, cands, rewards, refs, 1e-6).unwrap();
    assert!(b.v_count() >= 2 && b.f_hat.iter().any(|&f| f != 0.0));
    b
}

fn no_kl() -> TrainerConfig {
    TrainerConfig {
        beta_discrete: 0.0,
        beta_continuous: 0.0,
        ..TrainerConfig::default()
    }
}

#[test]
fn clip_examples() {
    assert_eq!(clipped_surrogate(1.0, 1.0, 0.2), 1.0);
    assert!((clipped_surrogate(1.3, 1.0, 0.2) - 1.2).abs() < 1e-15);
    assert!((clipped_surrogate(0.7, 1.0, 0.2) - 0.7).abs() < 1e-15);
    assert!((clipped_surrogate(0.7, -1.0, 0.2) + 0.8).abs() < 1e-15);
    assert!((clipped_surrogate(1.3, -1.0, 0.2) + 1.3).abs() < 1e-15);
    assert_eq!(clipped_surrogate(5.0, 0.0, 0.2), 0.0);
}

#[test]
fn factorization_rejects_bad_inputs() {
    assert!(ratios_from_logps(f64::NAN, 0.0, None, None).is_err());
    assert!(ratios_from_logps(0.0, 0.0, Some(1.0), None).is_err());
    let r = ratios_from_logps(-1.0, -1.5, Some(2.0), Some(1.0)).unwrap();
    assert!((r.r_d - 0.5f64.exp()).abs() < 1e-15);
    assert!((r.r_c.unwrap() - 1f64.exp()).abs() < 1e-15);
    assert!(r.factorization_error <= 1e-12);
}

#[test]
fn on_policy_objective_is_zero() {
    let env = env();
    let pi = policy(&env, 3);
    let b = rich_batch(&env, &pi, TaskKind::Text2Pose);
    let out = hygrpo_loss(&[b], &pi, &TrainerConfig::default()).unwrap();
    assert!(out.loss.abs() < 1e-12, "{}", out.loss);
    assert!(out.kl.abs() < 1e-12);
    assert!(out.gradient.iter().any(|&g| g != 0.0));
    for t in out.terms.iter().flatten() {
        assert_eq!(t.ratios.r_d, 1.0);
        assert!(!t.clipped);
    }
}

#[test]
fn unclipped_loss_matches_ratio_weighted_advantages() {
    let env = env();
    let pi = policy(&env, 6);
    let b = rich_batch(&env, &pi, TaskKind::Text2Pose);
    let theta = perturbed(&pi, 1e-3, 11);
    let cfg = TrainerConfig {
        clip_eps_discrete: 0.5,
        clip_eps_continuous: 0.5,
        ..no_kl()
    };
    let out = hygrpo_loss(std::slice::from_ref(&b), &theta, &cfg).unwrap();
    let terms = &out.terms[0];
    assert_eq!(terms.len(), b.group_size());
    let g = b.group_size() as f64;
    let v = b.v_count() as f64;
    let mut objective = 0.0;
    for (i, t) in terms.iter().enumerate() {
        assert!(!t.clipped);
        objective += t.ratios.r_d * b.f_hat[i] / g;
        if let Some(d) = b.delta_hat[i] {
            objective += t.ratios.r_c.unwrap() * d / v;
        }
    }
    assert!(
        (out.loss + objective).abs() < 1e-10,
        "{} {}",
        out.loss,
        objective
    );
    assert!(out.loss != 0.0);
}

#[test]
fn zero_continuous_advantage_isolates_pose_head() {
    let env = env();
    let pi = policy(&env, 4);
    let mut b = rich_batch(&env, &pi, TaskKind::Image2Pose);
    let v = b.v_count();
    b.set_delta_hat(&vec![0.0; v]);
    let theta = perturbed(&pi, 1e-2, 9);
    let g = hygrpo_loss(&[b], &theta, &no_kl()).unwrap().gradient;
    let pose = &g[theta.layout().pose_head_range()];
    assert!(pose.iter().all(|&x| x == 0.0));
    assert!(g[theta.layout().token_head_range()]
        .iter()
        .any(|&x| x != 0.0));
}

#[test]
fn zero_discrete_advantage_isolates_token_head() {
    let env = env();
    let pi = policy(&env, 5);
    let mut b = rich_batch(&env, &pi, TaskKind::Text2Pose);
    b.f_hat.iter_mut().for_each(|f| *f = 0.0);
    let theta = perturbed(&pi, 1e-2, 10);
    let g = hygrpo_loss(&[b], &theta, &no_kl()).unwrap().gradient;
    assert!(g[theta.layout().token_head_range()]
        .iter()
        .all(|&x| x == 0.0));
    assert!(g[theta.layout().pose_head_range()]
        .iter()
        .any(|&x| x != 0.0));
}

#[test]
fn continuous_reward_scale_does_not_change_gradient() {
    let env = env();
    let pi = policy(&env, 6);
    let b = rich_batch(&env, &pi, TaskKind::Image2Pose);
    let mut scaled_rewards = b.rewards.clone();
    for r in &mut scaled_rewards {
        r.r_continuous = r.r_continuous.map(|v| v * 1e3);
    }
    let scaled = GroupBatch::new(
        b.task.clone(),
        b.candidates.clone(),
        scaled_rewards,
        b.reference.clone(),
        1e-6,
    )
    .unwrap();
    let theta = perturbed(&pi, 1e-2, 11);
    let cfg = TrainerConfig::default();
    let a = hygrpo_loss(&[b], &theta, &cfg).unwrap().gradient;
    let c = hygrpo_loss(&[scaled], &theta, &cfg).unwrap().gradient;
    for (x, y) in a.iter().zip(&c) {
        assert!(
            (x - y).abs() <= 1e-10 * x.abs().max(1e-300) || x == y,
            "{x} {y}"
        );
    }
}

#[test]
fn discrete_only_mode_skips_continuous_terms() {
    let env = env();
    let pi = policy(&env, 7);
    let b = rich_batch(&env, &pi, TaskKind::Image2Pose);
    let theta = perturbed(&pi, 1e-2, 12);
    let cfg = TrainerConfig {
        mode: UpdateMode::DiscreteOnly,
        ..TrainerConfig::default()
    };
    let out = hygrpo_loss(&[b], &theta, &cfg).unwrap();
    assert!(out.gradient[theta.layout().pose_head_range()]
        .iter()
        .all(|&x| x == 0.0));
    assert!(out.terms[0]
        .iter()
        .all(|t| t.surrogate_c.is_none() && t.kl_c.is_none()));
    assert_eq!(out.loss_continuous, 0.0);
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let bandit = GaussianPeakBandit::new(0.3, 0.5);
    let cfg = PolicyConfig {
        embed_dim: 1,
        state_dim: 2,
        token_hidden: 2,
        pose_hidden: 2,
        max_len: 2,
        ..PolicyConfig::default()
    };
    let pi = HybridPolicy::new(cfg, bandit.vocab(), 1, None, 2).unwrap();
    assert!(pi.num_params() <= 50);
    let reference = perturbed(&pi, 5e-3, 1);
    let task = bandit.task();
    let b = batch(&pi, &reference, &task, &bandit, 8, 21);
    let tc = TrainerConfig::default();
    let out = hygrpo_loss(std::slice::from_ref(&b), &pi, &tc).unwrap();
    let h = 1e-5;
    let base = pi.flatten();
    let mut fd = vec![0.0; base.len()];
    for (i, d) in fd.iter_mut().enumerate() {
        let eval = |delta: f64| {
            let mut p = base.clone();
            p[i] += delta;
            let mut q = pi.clone();
            q.restore(&p).unwrap();
            hygrpo_loss(std::slice::from_ref(&b), &q, &tc).unwrap().loss
        };
        *d = (eval(h) - eval(-h)) / (2.0 * h);
    }
    let diff: f64 = out
        .gradient
        .iter()
        .zip(&fd)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(diff <= 1e-4 * norm, "{diff} vs {norm}");
}

#[test]
fn trainer_rejects_deterministic_head() {
    let env = env();
    let mut pi = policy(&env, 1);
    pi.set_head_kind(PoseHeadKind::Deterministic);
    assert!(Trainer::new(pi, TrainerConfig::default(), 1).is_err());
}

#[test]
fn config_validation() {
    assert!(TrainerConfig::default().validate().is_ok());
    for bad in [
        TrainerConfig {
            group_size: 1,
            ..TrainerConfig::default()
        },
        TrainerConfig {
            clip_eps_discrete: 0.0,
            ..TrainerConfig::default()
        },
        TrainerConfig {
            beta_continuous: -1.0,
            ..TrainerConfig::default()
        },
        TrainerConfig {
            eps_std: 0.0,
            ..TrainerConfig::default()
        },
        TrainerConfig {
            batch_size: 0,
            ..TrainerConfig::default()
        },
    ] {
        assert!(bad.validate().is_err());
    }
}

fn small_trainer(env: &Environment, mode: UpdateMode, seed: u64) -> Trainer {
    let cfg = TrainerConfig {
        group_size: 4,
        batch_size: 3,
        steps: 10,
        mode,
        ..TrainerConfig::default()
    };
    Trainer::new(policy(env, seed), cfg, seed).unwrap()
}

fn tasks(env: &Environment, step: u64) -> Vec<TaskInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(step);
    env.generate_batch(&TaskMix::default(), 3, &mut rng)
        .unwrap()
}

#[test]
fn first_step_is_on_policy() {
    let env = env();
    let scorer = EnvScorer::new(&env, RewardConfig::default());
    let mut t = small_trainer(&env, UpdateMode::Hybrid, 1);
    let r = t.train_step(&tasks(&env, 0), &scorer).unwrap();
    assert!(r.max_factorization_error <= 1e-12);
    assert!(r.tasks.iter().all(|m| m.clip_frac == 0.0));
    assert!(r.loss.abs() < 1e-12);
    assert_eq!(r.tasks.len(), 3);
    assert_eq!(t.step(), 1);
}

#[test]
fn training_is_deterministic() {
    let env = env();
    let scorer = EnvScorer::new(&env, RewardConfig::default());
    let run = || {
        let mut t = small_trainer(&env, UpdateMode::Hybrid, 2);
        let reports: Vec<_> = (0..3)
            .map(|s| t.train_step(&tasks(&env, s), &scorer).unwrap())
            .collect();
        (reports, t.policy().flatten())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
}

#[test]
fn discrete_only_training_freezes_pose_head() {
    let env = env();
    let scorer = EnvScorer::new(&env, RewardConfig::default());
    let mut t = small_trainer(&env, UpdateMode::DiscreteOnly, 3);
    let range = t.policy().layout().pose_head_range();
    let before = t.policy().flatten();
    for s in 0..3 {
        t.train_step(&tasks(&env, s), &scorer).unwrap();
    }
    let after = t.policy().flatten();
    assert_eq!(before[range.clone()], after[range]);
    assert_ne!(before, after);
}

struct Constant;

impl Scorer for Constant {
    fn score(
        &self,
        _: &TaskInstance,
        _: &crate::policy::HybridResponse,
    ) -> crate::Result<RewardBreakdown> {
        Ok(RewardBreakdown {
            r_discrete: 1.0,
            ..RewardBreakdown::default()
        })
    }
}

#[test]
fn heavy_kl_anchor_keeps_update_small() {
    let env = env();
    let scorer = EnvScorer::new(&env, RewardConfig::default());
    let cfg = TrainerConfig {
        group_size: 4,
        batch_size: 3,
        learning_rate: 1e-6,
        beta_discrete: 1e3,
        beta_continuous: 1e3,
        ..TrainerConfig::default()
    };
    let mut t = Trainer::new(policy(&env, 6), cfg, 6).unwrap();
    let before = t.policy().flatten();
    let r = t.train_step(&tasks(&env, 0), &scorer).unwrap();
    assert!(r.updated);
    let after = t.policy().flatten();
    let worst = before
        .iter()
        .zip(&after)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst > 0.0 && worst < 1e-6, "{worst}");
}

#[test]
fn degenerate_batch_leaves_parameters_alone() {
    let env = env();
    let mut t = small_trainer(&env, UpdateMode::Hybrid, 4);
    let before = t.policy().flatten();
    let r = t.train_step(&tasks(&env, 0), &Constant).unwrap();
    assert!(r.degenerate && !r.updated);
    assert_eq!(before, t.policy().flatten());
    assert_eq!(t.step(), 1);
}

#[test]
fn fixed_reference_stays_put() {
    let env = env();
    let scorer = EnvScorer::new(&env, RewardConfig::default());
    let cfg = TrainerConfig {
        group_size: 4,
        batch_size: 3,
        reference: ReferenceMode::Fixed,
        ..TrainerConfig::default()
    };
    let pi = policy(&env, 5);
    let init = pi.flatten();
    let mut t = Trainer::new(pi, cfg, 5).unwrap();
    for s in 0..2 {
        t.train_step(&tasks(&env, s), &scorer).unwrap();
    }
    assert_eq!(t.fixed_reference_params().unwrap(), init);
    assert_ne!(t.policy().flatten(), init);
}

#[test]
fn bandit_scorer() {
    let b = GaussianPeakBandit::new(0.5, 0.2);
    let pi = b.policy(1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..50 {
        let resp = pi.sample(&b.task().query, &mut rng).unwrap();
        let r = b.score(&b.task(), &resp).unwrap();
        assert_eq!(r.r_format == Some(1.0), resp.tokens == b.canonical_tokens());
        if let Some(c) = r.r_continuous {
            assert!(c > 0.0 && c <= 1.0);
        }
    }
}
