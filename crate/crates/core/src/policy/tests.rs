use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::env::{EnvConfig, Environment};
use crate::vocab::{ANSWER_PREFIX, END, PERIOD, POSE};

fn env() -> Environment {
    Environment::new(EnvConfig::default()).unwrap()
}

fn policy(env: &Environment, seed: u64) -> HybridPolicy {
    HybridPolicy::new(
        PolicyConfig::default(),
        &env.vocab,
        env.pose_dim(),
        Some(env.visual.clone()),
        seed,
    )
    .unwrap()
}

fn tiny_vocab(n: usize) -> Vocabulary {
    Vocabulary::new(
        (0..n).map(|i| format!("t{i}")).collect(),
        0,
        (n - 1) as TokenId,
    )
}

fn text_query() -> Query {
    Query::new(vec![9, 12, 13], None, TaskKind::Text2Pose)
}

const TEMPLATE: [TokenId; 4] = [ANSWER_PREFIX, POSE, PERIOD, END];

#[test]
fn encode_state_is_deterministic() {
    let env = env();
    let pi = policy(&env, 1);
    let q = text_query();
    assert_eq!(
        pi.encode_state(&q, &[]).unwrap(),
        pi.encode_state(&q, &[]).unwrap()
    );
    assert_ne!(
        pi.encode_state(&q, &[]).unwrap(),
        pi.encode_state(&q, &[ANSWER_PREFIX]).unwrap()
    );
}

#[test]
fn image_features_change_state() {
    let env = env();
    for seed in 0..100 {
        let pi = policy(&env, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = env
            .generate_task(TaskKind::Image2Pose, &mut rng)
            .unwrap()
            .query;
        let mut b = a.clone();
        b.image_features = Some(
            a.image_features
                .as_ref()
                .unwrap()
                .iter()
                .map(|x| x + 0.5)
                .collect(),
        );
        assert_ne!(
            pi.encode_state(&a, &[]).unwrap(),
            pi.encode_state(&b, &[]).unwrap()
        );
    }
}

#[test]
fn image_without_visual_branch_is_rejected() {
    let env = env();
    let pi = HybridPolicy::new(PolicyConfig::default(), &env.vocab, 12, None, 0).unwrap();
    let q = env
        .generate_task(TaskKind::Image2Pose, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap()
        .query;
    assert!(pi.encode_state(&q, &[]).is_err());
}

#[test]
fn single_token_vocabulary_always_terminates() {
    let vocab = Vocabulary::new(vec![String::new()], 0, 0);
    let pi = HybridPolicy::new(PolicyConfig::default(), &vocab, 1, None, 3).unwrap();
    let q = Query::new(vec![0], None, TaskKind::Qa);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let (tokens, logp, truncated) = pi.sample_discrete(&q, &mut rng).unwrap();
        assert_eq!(tokens, vec![0]);
        assert_eq!(logp, 0.0);
        assert!(!truncated);
    }
}

#[test]
fn sampling_is_reproducible() {
    let env = env();
    let pi = policy(&env, 4);
    let q = text_query();
    let a = pi.sample(&q, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let b = pi.sample(&q, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn first_token_frequencies_match_softmax() {
    let pi = HybridPolicy::new(PolicyConfig::default(), &tiny_vocab(3), 1, None, 11).unwrap();
    let q = Query::new(vec![1, 2], None, TaskKind::Qa);
    let probs: Vec<f64> = pi
        .token_distribution(&q, &[])
        .unwrap()
        .iter()
        .map(|l| l.exp())
        .collect();
    let n = 10_000;
    let mut counts = [0usize; 3];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..n {
        let (tokens, _, _) = pi.sample_discrete(&q, &mut rng).unwrap();
        counts[tokens[0] as usize] += 1;
    }
    for k in 0..3 {
        assert!((counts[k] as f64 / n as f64 - probs[k]).abs() < 0.02);
    }
}

#[test]
fn truncated_sequences_are_flagged() {
    let vocab = tiny_vocab(3);
    let cfg = PolicyConfig {
        max_len: 2,
        ..PolicyConfig::default()
    };
    let mut pi = HybridPolicy::new(cfg, &vocab, 1, None, 0).unwrap();
    // bias the token head so END is never chosen
    let mut flat = pi.flatten();
    let l = pi.layout().clone();
    let last_bias = l.pose_trunk - 3;
    flat[last_bias] = -50.0;
    pi.restore(&flat).unwrap();
    let (tokens, _, truncated) = pi
        .sample_discrete(
            &Query::new(vec![1], None, TaskKind::Qa),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
    assert_eq!(tokens.len(), 2);
    assert!(truncated);
}

#[test]
fn zero_pose_head_gives_softplus_zero_variance() {
    let env = env();
    let mut pi = policy(&env, 5);
    let mut flat = pi.flatten();
    for v in &mut flat[pi.layout().pose_head_range()] {
        *v = 0.0;
    }
    pi.restore(&flat).unwrap();
    let g = pi.pose_head(&text_query(), &TEMPLATE).unwrap();
    assert!(g.mean().iter().all(|&m| m == 0.0));
    for &v in g.diag_var().iter() {
        assert!((v - (std::f64::consts::LN_2 + 1e-4)).abs() < 1e-15);
    }
}

#[test]
fn pose_head_outputs_finite_and_floored() {
    let env = env();
    for seed in 0..1000 {
        let pi = policy(&env, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = TaskKind::ALL[seed as usize % 3];
        let q = env.generate_task(kind, &mut rng).unwrap().query;
        let g = pi.pose_head(&q, &TEMPLATE).unwrap();
        assert!(g.mean().is_finite() && g.diag_var().is_finite());
        assert!(g.diag_var().iter().all(|&v| v >= 1e-4));
    }
}

#[test]
fn pose_head_requires_single_trigger() {
    let env = env();
    let pi = policy(&env, 6);
    let q = text_query();
    assert!(pi.pose_head(&q, &[ANSWER_PREFIX, PERIOD, END]).is_err());
    assert!(pi.pose_head(&q, &[POSE, POSE, END]).is_err());
    assert_eq!(
        pi.pose_head(&q, &TEMPLATE).unwrap(),
        pi.pose_head(&q, &TEMPLATE).unwrap()
    );
}

#[test]
fn factorization_recomputed_independently() {
    let env = env();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut checked = 0;
    for seed in 0..100 {
        let mut pi = policy(&env, seed);
        // favour short responses that often carry one trigger
        let mut flat = pi.flatten();
        let b = pi.layout().pose_trunk - pi.vocab_size();
        flat[b + END as usize] += 2.5;
        flat[b + POSE as usize] += 2.5;
        pi.restore(&flat).unwrap();
        let q = env
            .generate_task(TaskKind::Text2Pose, &mut rng)
            .unwrap()
            .query;
        let r = pi.sample(&q, &mut rng).unwrap();
        let mut logp_d = 0.0;
        for t in 0..r.tokens.len() {
            let lp = pi.token_distribution(&q, &r.tokens[..t]).unwrap();
            logp_d += lp[r.tokens[t] as usize];
        }
        assert!((logp_d - r.logp_discrete).abs() < 1e-12);
        if let Some(p) = &r.pose {
            let g = pi.pose_head(&q, &r.tokens).unwrap();
            let lc = gaussian_logpdf(p, &g).unwrap();
            assert!((r.total_logp() - (logp_d + lc)).abs() < 1e-10);
            checked += 1;
        } else {
            assert!(r.logp_continuous.is_none());
        }
    }
    assert!(checked > 10, "only {checked} responses carried a pose");
}

#[test]
fn evaluate_reproduces_sampled_values_bitwise() {
    let env = env();
    let pi = policy(&env, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for kind in TaskKind::ALL {
        let q = env.generate_task(kind, &mut rng).unwrap().query;
        for _ in 0..5 {
            let r = pi.sample(&q, &mut rng).unwrap();
            let ev = pi.evaluate(&q, &r).unwrap();
            assert_eq!(ev.logp_discrete.to_bits(), r.logp_discrete.to_bits());
            assert_eq!(
                ev.logp_continuous.map(f64::to_bits),
                r.logp_continuous.map(f64::to_bits)
            );
        }
    }
}

#[test]
fn snapshot_is_frozen() {
    let env = env();
    let mut pi = policy(&env, 7);
    let snap = pi.snapshot();
    let q = text_query();
    let before = snap.pose_head(&q, &TEMPLATE).unwrap();
    assert_eq!(snap, pi.snapshot());
    let mut flat = pi.flatten();
    for v in &mut flat {
        *v += 0.01;
    }
    pi.restore(&flat).unwrap();
    assert_eq!(snap.pose_head(&q, &TEMPLATE).unwrap(), before);
    assert_ne!(pi.pose_head(&q, &TEMPLATE).unwrap(), before);
    assert_eq!(snap.flatten().len(), pi.flatten().len());
}

#[test]
fn flatten_restore_round_trip() {
    let env = env();
    let pi = policy(&env, 8);
    let flat = pi.flatten();
    assert_eq!(flat.len(), pi.num_params());
    let mut other = policy(&env, 9);
    other.restore(&flat).unwrap();
    assert_eq!(other.flatten(), flat);
    assert_eq!(
        other.encode_state(&text_query(), &[]).unwrap(),
        pi.encode_state(&text_query(), &[]).unwrap()
    );
    assert!(other.restore(&flat[1..]).is_err());
}

#[test]
fn kl_discrete_zero_for_identical_and_nonnegative() {
    let env = env();
    let a = policy(&env, 13);
    let b = policy(&env, 14);
    let q = text_query();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let r = a.sample(&q, &mut rng).unwrap();
        assert_eq!(a.kl_discrete(&a, &q, &r.tokens).unwrap(), 0.0);
        assert!(a.kl_discrete(&b, &q, &r.tokens).unwrap() >= -1e-12);
    }
}

#[test]
fn record_rejects_inconsistent_pose() {
    let env = env();
    let pi = policy(&env, 15);
    let mut tape = pi.new_tape();
    let q = text_query();
    assert!(pi.record(&mut tape, &q, &TEMPLATE, None).is_err());
    assert!(pi
        .record(&mut tape, &q, &[ANSWER_PREFIX, END], Some(&[0.0; 12]))
        .is_err());
    assert!(pi.record(&mut tape, &q, &[], None).is_err());
}

#[test]
fn response_log_prob_gradient_matches_finite_differences() {
    let env = env();
    let cfg = PolicyConfig {
        embed_dim: 3,
        visual_proj_dim: 2,
        state_dim: 5,
        token_hidden: 4,
        pose_hidden: 4,
        ..PolicyConfig::default()
    };
    let pi = HybridPolicy::new(cfg, &env.vocab, 12, Some(env.visual.clone()), 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = env
        .generate_task(TaskKind::Image2Pose, &mut rng)
        .unwrap()
        .query;
    let pose: Vec<f64> = (0..12).map(|i| (i as f64 * 0.3).sin()).collect();
    let total = |p: &HybridPolicy| {
        let mut tape = p.new_tape();
        let v = p.record(&mut tape, &q, &TEMPLATE, Some(&pose)).unwrap();
        tape.scalar(v.logp_discrete) + tape.scalar(v.logp_continuous.unwrap())
    };
    let mut tape = pi.new_tape();
    let v = pi.record(&mut tape, &q, &TEMPLATE, Some(&pose)).unwrap();
    let sum = tape
        .add(v.logp_discrete, v.logp_continuous.unwrap())
        .unwrap();
    let grad = tape.gradients(sum).unwrap();
    let theta = pi.flatten();
    let h = 1e-5;
    let mut checked = 0;
    for i in 0..theta.len() {
        let an = grad.params()[i];
        let mut plus = pi.clone();
        let mut minus = pi.clone();
        let mut t = theta.clone();
        t[i] += h;
        plus.restore(&t).unwrap();
        t[i] -= 2.0 * h;
        minus.restore(&t).unwrap();
        let fd = (total(&plus) - total(&minus)) / (2.0 * h);
        // roundoff in the difference quotient is about 1e-9 here
        if an.abs() > 1e-8 {
            assert!(
                (an - fd).abs() < 1e-4 * an.abs().max(fd.abs()) + 1e-9,
                "param {i}: {an} vs {fd}"
            );
            checked += 1;
        }
    }
    assert!(checked > theta.len() / 2);
}
