use serde::{Deserialize, Serialize};

use super::advantage::group_normalize;
use super::TrainerConfig;
use crate::env::TaskInstance;
use crate::error::{Error, Result};
use crate::math::{Tape, Var};
use crate::policy::{
    kl_categorical, kl_categorical_tape, kl_gaussian, kl_gaussian_tape, Evaluation, HybridPolicy,
    HybridResponse, ResponseVars,
};
use crate::rewards::RewardBreakdown;

/// Which heads the surrogate trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// Both the token and the pose branch.
    Hybrid,
    /// Token branch only; the pose head never receives a gradient.
    DiscreteOnly,
}

/// `min(r A, clip(r, 1−ε, 1+ε) A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// Current-to-reference probability ratios for one candidate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub r_d: f64,
    pub r_c: Option<f64>,
    /// `exp` of the total log-probability difference.
    pub joint: f64,
    /// `|r_d r_c − joint| / joint`.
    pub factorization_error: f64,
}

/// Ratios from log-probabilities. Fails when any input is not finite or the
/// factorization `r = r_d · r_c` does not hold to 1e-12.
pub fn ratios_from_logps(
    theta_d: f64,
    ref_d: f64,
    theta_c: Option<f64>,
    ref_c: Option<f64>,
) -> Result<Ratios> {
    let finite = [Some(theta_d), Some(ref_d), theta_c, ref_c]
        .into_iter()
        .flatten()
        .all(f64::is_finite);
    if !finite {
        return Err(Error::NonFinite("log-probability".into()));
    }
    let r_d = (theta_d - ref_d).exp();
    let (r_c, joint) = match (theta_c, ref_c) {
        (Some(a), Some(b)) => (Some((a - b).exp()), ((theta_d + a) - (ref_d + b)).exp()),
        (None, None) => (None, r_d),
        _ => {
            return Err(Error::Contract(
                "pose log-probability present under only one policy".into(),
            ))
        }
    };
    let product = r_d * r_c.unwrap_or(1.0);
    let factorization_error = if joint == 0.0 {
        product.abs()
    } else {
        ((product - joint) / joint).abs()
    };
    if factorization_error > 1e-12 {
        return Err(Error::Contract(format!(
            "ratio factorization off by {factorization_error:e}"
        )));
    }
    Ok(Ratios {
        r_d,
        r_c,
        joint,
        factorization_error,
    })
}

/// `(r_d, r_c)` of `response` under `theta` against `reference`.
pub fn importance_ratios(
    theta: &HybridPolicy,
    reference: &HybridPolicy,
    task: &TaskInstance,
    response: &HybridResponse,
) -> Result<Ratios> {
    let a = theta.evaluate(&task.query, response)?;
    let b = reference.evaluate(&task.query, response)?;
    ratios_from_logps(
        a.logp_discrete,
        b.logp_discrete,
        a.logp_continuous,
        b.logp_continuous,
    )
}

/// `G` scored candidates for one query with their advantages.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupBatch {
    pub task: TaskInstance,
    pub candidates: Vec<HybridResponse>,
    pub rewards: Vec<RewardBreakdown>,
    /// Discrete advantages, one per candidate.
    pub f_hat: Vec<f64>,
    /// Continuous advantages, present for V-set members only.
    pub delta_hat: Vec<Option<f64>>,
    /// Reference-policy values for each candidate.
    pub reference: Vec<Evaluation>,
}

impl GroupBatch {
    pub fn new(
        task: TaskInstance,
        candidates: Vec<HybridResponse>,
        rewards: Vec<RewardBreakdown>,
        reference: Vec<Evaluation>,
        eps_std: f64,
    ) -> Result<Self> {
        let g = candidates.len();
        if rewards.len() != g || reference.len() != g || g == 0 {
            return Err(Error::Contract(
                "group needs one reward and one reference value per candidate".into(),
            ));
        }
        let r_d: Vec<f64> = rewards.iter().map(|r| r.r_discrete).collect();
        let f_hat = group_normalize(&r_d, eps_std)?;
        let members: Vec<usize> = (0..g).filter(|&i| rewards[i].in_v_set()).collect();
        let mut delta_hat = vec![None; g];
        if !members.is_empty() {
            let r_c: Vec<f64> = members
                .iter()
                .map(|&i| rewards[i].r_continuous.expect("V-set member has R_c"))
                .collect();
            for (&i, z) in members.iter().zip(group_normalize(&r_c, eps_std)?) {
                delta_hat[i] = Some(z);
            }
        }
        Ok(Self {
            task,
            candidates,
            rewards,
            f_hat,
            delta_hat,
            reference,
        })
    }

    pub fn group_size(&self) -> usize {
        self.candidates.len()
    }

    pub fn v_count(&self) -> usize {
        self.delta_hat.iter().filter(|d| d.is_some()).count()
    }

    /// Every advantage is zero, so the surrogate carries no signal.
    pub fn is_degenerate(&self) -> bool {
        self.f_hat.iter().all(|&f| f == 0.0) && self.delta_hat.iter().flatten().all(|&d| d == 0.0)
    }

    /// Overwrites the continuous advantages, keeping V-set membership.
    pub fn set_delta_hat(&mut self, values: &[f64]) {
        let mut it = values.iter();
        for d in self.delta_hat.iter_mut().flatten() {
            *d = *it.next().expect("one value per V-set member");
        }
    }
}

/// Per-candidate contributions, all in objective units (higher is better).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateTerms {
    pub ratios: Ratios,
    /// `min(r_d F̂, clip(r_d) F̂)`.
    pub surrogate_d: f64,
    /// `min(r_c Δ̂, clip(r_c) Δ̂)` for V-set members.
    pub surrogate_c: Option<f64>,
    pub kl_d: f64,
    pub kl_c: Option<f64>,
    pub clipped: bool,
}

/// Records this candidate's share of the negated objective on `tape`.
/// `scale` is the weight of the candidate's group in the batch mean.
#[allow(clippy::too_many_arguments)]
pub(crate) fn candidate_loss(
    tape: &mut Tape,
    vars: &ResponseVars,
    reference: &Evaluation,
    f_hat: f64,
    delta_hat: Option<f64>,
    group_size: usize,
    v_count: usize,
    scale: f64,
    cfg: &TrainerConfig,
) -> Result<(Var, CandidateTerms)> {
    let theta_d = tape.scalar(vars.logp_discrete);
    let theta_c = vars.logp_continuous.map(|v| tape.scalar(v));
    let ratios = ratios_from_logps(
        theta_d,
        reference.logp_discrete,
        theta_c,
        reference.logp_continuous,
    )?;
    let hybrid = cfg.mode == UpdateMode::Hybrid;
    let inv_g = 1.0 / group_size as f64;
    let mut parts: Vec<Var> = Vec::with_capacity(4);

    let (eps_d, eps_c) = (cfg.clip_eps_discrete, cfg.clip_eps_continuous);
    let ref_d = tape.constant(vec![reference.logp_discrete]);
    let diff = tape.sub(vars.logp_discrete, ref_d)?;
    let r_d = tape.exp(diff);
    let surrogate_d = clipped_surrogate(ratios.r_d, f_hat, eps_d);
    parts.push(clipped_term(tape, r_d, f_hat, eps_d, inv_g)?);
    let mut clipped = (ratios.r_d - 1.0).abs() > eps_d;

    let mut surrogate_c = None;
    if let (true, Some(adv), Some(lp), Some(rc)) =
        (hybrid, delta_hat, vars.logp_continuous, ratios.r_c)
    {
        let inv_v = 1.0 / v_count as f64;
        let ref_c = tape.constant(vec![reference.logp_continuous.expect("checked above")]);
        let diff = tape.sub(lp, ref_c)?;
        let r_c = tape.exp(diff);
        parts.push(clipped_term(tape, r_c, adv, eps_c, inv_v)?);
        surrogate_c = Some(clipped_surrogate(rc, adv, eps_c));
        clipped |= (rc - 1.0).abs() > eps_c;
    }

    let mut kl_d = 0.0;
    for (t, lp) in vars.step_logprobs.iter().enumerate() {
        kl_d += kl_categorical(tape.value(*lp), &reference.step_logprobs[t])?;
    }
    if cfg.beta_discrete > 0.0 {
        let mut acc: Option<Var> = None;
        for (t, lp) in vars.step_logprobs.iter().enumerate() {
            let k = kl_categorical_tape(tape, *lp, &reference.step_logprobs[t])?;
            acc = Some(match acc {
                Some(a) => tape.add(a, k)?,
                None => k,
            });
        }
        if let Some(k) = acc {
            parts.push(tape.scale(k, -cfg.beta_discrete * inv_g));
        }
    }

    let mut kl_c = None;
    if let (true, Some(_), Some((mean, var)), Some(g_ref)) = (
        hybrid,
        delta_hat,
        vars.gaussian,
        reference.gaussian.as_ref(),
    ) {
        let g_theta = crate::policy::GaussianParams::new(
            tape.value(mean).to_vec().into(),
            tape.value(var).to_vec().into(),
        )?;
        kl_c = Some(kl_gaussian(&g_theta, g_ref)?);
        if cfg.beta_continuous > 0.0 {
            let k = kl_gaussian_tape(tape, mean, var, g_ref)?;
            parts.push(tape.scale(k, -cfg.beta_continuous / v_count as f64));
        }
    }

    let joined = tape.concat(&parts);
    let objective = tape.sum(joined);
    let loss = tape.scale(objective, -scale);
    Ok((
        loss,
        CandidateTerms {
            ratios,
            surrogate_d,
            surrogate_c,
            kl_d,
            kl_c,
            clipped,
        },
    ))
}

/// `weight · min(r A, clip(r) A)` on the tape.
fn clipped_term(tape: &mut Tape, ratio: Var, adv: f64, eps: f64, weight: f64) -> Result<Var> {
    let plain = tape.scale(ratio, adv);
    let clipped = tape.clamp(ratio, 1.0 - eps, 1.0 + eps);
    let clipped = tape.scale(clipped, adv);
    let m = tape.min(plain, clipped)?;
    Ok(tape.scale(m, weight))
}

/// Loss value, its gradient, and the per-candidate bookkeeping.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub gradient: Vec<f64>,
    /// Negated mean discrete surrogate over groups.
    pub loss_discrete: f64,
    /// Negated mean continuous surrogate over groups.
    pub loss_continuous: f64,
    /// Mean over groups of `(1/G) Σ KL_d + (1/V) Σ KL_c`.
    pub kl: f64,
    pub terms: Vec<Vec<CandidateTerms>>,
}

/// Per-group summaries of candidate terms.
pub(crate) struct GroupSummary {
    pub surrogate_d: f64,
    pub surrogate_c: f64,
    pub kl: f64,
}

pub(crate) fn summarize(terms: &[CandidateTerms], v_count: usize) -> GroupSummary {
    let g = terms.len() as f64;
    let v = v_count.max(1) as f64;
    GroupSummary {
        surrogate_d: terms.iter().map(|t| t.surrogate_d).sum::<f64>() / g,
        surrogate_c: terms.iter().filter_map(|t| t.surrogate_c).sum::<f64>() / v,
        kl: terms.iter().map(|t| t.kl_d).sum::<f64>() / g
            + terms.iter().filter_map(|t| t.kl_c).sum::<f64>() / v,
    }
}

/// Negated objective averaged over `batches`, with its exact gradient.
pub fn hygrpo_loss(
    batches: &[GroupBatch],
    theta: &HybridPolicy,
    cfg: &TrainerConfig,
) -> Result<LossOutput> {
    let mut gradient = vec![0.0; theta.num_params()];
    let mut loss = 0.0;
    let (mut ld, mut lc, mut kl) = (0.0, 0.0, 0.0);
    let mut all_terms = Vec::with_capacity(batches.len());
    let n = batches.len().max(1) as f64;
    for b in batches {
        let mut terms = Vec::with_capacity(b.group_size());
        for i in 0..b.group_size() {
            let mut tape = theta.new_tape();
            let c = &b.candidates[i];
            let vars = theta.record(&mut tape, &b.task.query, &c.tokens, c.pose.as_deref())?;
            let (l, t) = candidate_loss(
                &mut tape,
                &vars,
                &b.reference[i],
                b.f_hat[i],
                b.delta_hat[i],
                b.group_size(),
                b.v_count(),
                1.0 / n,
                cfg,
            )?;
            loss += tape.scalar(l);
            for (acc, g) in gradient.iter_mut().zip(tape.gradients(l)?.params()) {
                *acc += g;
            }
            terms.push(t);
        }
        let s = summarize(&terms, b.v_count());
        ld -= s.surrogate_d / n;
        lc -= s.surrogate_c / n;
        kl += s.kl / n;
        all_terms.push(terms);
    }
    Ok(LossOutput {
        loss,
        gradient,
        loss_discrete: ld,
        loss_continuous: lc,
        kl,
        terms: all_terms,
    })
}
