//! Verifiable rewards and the frozen toy encoders they rely on.

use std::sync::LazyLock;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::env::{Environment, KinematicChain, TaskInstance};
use crate::error::{check_len, Error, Result};
use crate::math::{Matrix, Vector};
use crate::policy::{HybridResponse, Query, TaskKind};
use crate::vocab::{TokenId, Vocabulary};

static POSE_ANSWER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^The SMPL pose of this person is <POSE>\.$").unwrap());
static QA_ANSWER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[A-Z][a-z]+( [a-z]+)*\.$").unwrap());

/// Seeded linear text and pose encoders into a shared unit sphere.
///
/// `φ_p(p) = P p / |P p|` and `φ_t(bag) = P M bag / |P M bag|`, so every text
/// embedding lies in the range of `P` and has an exact pose preimage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyRetrievalEncoders {
    text_map: Matrix,
    pose_map: Matrix,
    pose_pinv: Matrix,
}

impl ToyRetrievalEncoders {
    pub fn new(vocab_size: usize, pose_dim: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if dim < pose_dim {
            return Err(Error::Config {
                key: "env.retrieval_dim".into(),
                reason: format!("must be at least the pose dimension {pose_dim}"),
            });
        }
        let scale = 1.0 / (dim as f64).sqrt();
        let p = DMatrix::from_fn(dim, pose_dim, |_, _| {
            rng.sample::<f64, _>(StandardNormal) * scale
        });
        let m = DMatrix::from_fn(pose_dim, vocab_size, |_, _| {
            rng.sample::<f64, _>(StandardNormal)
        });
        if p.clone().svd(false, false).rank(1e-10) != pose_dim {
            return Err(Error::Contract("pose encoder is rank deficient".into()));
        }
        let pinv = p
            .clone()
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::Contract(e.to_string()))?;
        let text = &p * &m;
        let convert = |d: &DMatrix<f64>| Matrix::from_fn(d.nrows(), d.ncols(), |r, c| d[(r, c)]);
        Ok(Self {
            text_map: convert(&text),
            pose_map: convert(&p),
            pose_pinv: convert(&pinv),
        })
    }

    pub fn dim(&self) -> usize {
        self.pose_map.rows()
    }

    fn bag(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        let mut bag = vec![0.0; self.text_map.cols()];
        for &t in tokens {
            let slot = bag
                .get_mut(t as usize)
                .ok_or_else(|| Error::Contract(format!("token id {t} outside vocabulary")))?;
            *slot += 1.0;
        }
        Ok(bag)
    }

    fn text_direction(&self, tokens: &[TokenId]) -> Result<Vector> {
        self.text_map.matvec(&self.bag(tokens)?)
    }

    /// `φ_t`: unit embedding of a prompt-token bag.
    pub fn encode_text(&self, tokens: &[TokenId]) -> Result<Vector> {
        self.text_direction(tokens)?
            .normalized()
            .ok_or_else(|| Error::Contract("text embedding has zero norm".into()))
    }

    /// `φ_p`: unit embedding of a pose.
    pub fn encode_pose(&self, pose: &[f64]) -> Result<Vector> {
        self.pose_map
            .matvec(pose)?
            .normalized()
            .ok_or_else(|| Error::Contract("pose embedding has zero norm".into()))
    }

    /// Minimum-norm pose whose embedding equals `φ_t(tokens)`.
    pub fn plant(&self, tokens: &[TokenId]) -> Result<Vector> {
        self.pose_pinv.matvec(&self.encode_text(tokens)?)
    }
}

/// Bag-of-tokens embedder with one orthonormal direction per token.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyTextEmbedder {
    vocab_size: usize,
    end: TokenId,
}

impl ToyTextEmbedder {
    pub fn new(vocab: &Vocabulary) -> Self {
        Self {
            vocab_size: vocab.len(),
            end: vocab.end(),
        }
    }

    /// Normalised token counts, end token ignored. `None` for an empty bag.
    pub fn embed(&self, tokens: &[TokenId]) -> Option<Vector> {
        let mut bag = Vector::zeros(self.vocab_size);
        for &t in tokens {
            if t != self.end && (t as usize) < self.vocab_size {
                bag[t as usize] += 1.0;
            }
        }
        bag.normalized()
    }
}

fn cosine(a: &Vector, b: &Vector) -> Result<f64> {
    Ok(a.dot(b)?.clamp(-1.0, 1.0))
}

/// Inverse stacked joint error, `1 / (|J_pred − J_gt| + δ)`. `None` when
/// the predicted joints are not finite.
pub fn joint_location_reward(
    p_pred: &[f64],
    p_gt: &[f64],
    fk: &KinematicChain,
    delta: f64,
) -> Result<Option<f64>> {
    let pred = fk.forward_flat(p_pred)?;
    let gt = fk.forward_flat(p_gt)?;
    if !pred.iter().all(|v| v.is_finite()) {
        return Ok(None);
    }
    let err = pred
        .iter()
        .zip(&gt)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(Some(1.0 / (err + delta)))
}

/// `cos(φ_t(q), φ_p(p))` for text-to-pose queries.
pub fn semantic_alignment_reward(
    q: &Query,
    pose: &[f64],
    enc: &ToyRetrievalEncoders,
) -> Result<f64> {
    if q.task != TaskKind::Text2Pose {
        return Err(Error::Contract(format!(
            "semantic reward needs a text2pose query, got {}",
            q.task
        )));
    }
    let t = enc.encode_text(&q.prompt_tokens)?;
    let p = enc.encode_pose(pose)?;
    cosine(&t, &p)
}

/// Whether a detokenized answer matches the template for `task`.
pub fn format_matches(text: &str, task: TaskKind) -> bool {
    match task {
        TaskKind::Text2Pose | TaskKind::Image2Pose => POSE_ANSWER.is_match(text),
        TaskKind::Qa => QA_ANSWER.is_match(text),
    }
}

/// 1 when the response ends properly, carries the right number of triggers
/// and its text matches the task template; 0 otherwise.
pub fn format_reward(tokens: &[TokenId], vocab: &Vocabulary, task: TaskKind) -> f64 {
    let Some(end_at) = tokens.iter().position(|&t| t == vocab.end()) else {
        return 0.0;
    };
    let body = &tokens[..end_at];
    if body.iter().any(|&t| t as usize >= vocab.len()) {
        return 0.0;
    }
    let triggers = body.iter().filter(|&&t| t == vocab.pose()).count();
    let expected = usize::from(task.is_pose_task());
    if end_at + 1 != tokens.len() || triggers != expected {
        return 0.0;
    }
    if format_matches(&vocab.detokenize(body), task) {
        1.0
    } else {
        0.0
    }
}

/// Cosine of the bag embeddings; 0 when either side is empty.
pub fn text_similarity_reward(
    a_pred: &[TokenId],
    a_gt: &[TokenId],
    embedder: &ToyTextEmbedder,
) -> f64 {
    match (embedder.embed(a_pred), embedder.embed(a_gt)) {
        (Some(a), Some(b)) => cosine(&a, &b).unwrap_or(0.0),
        _ => 0.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContinuousReward {
    Joint,
    Semantic,
}

/// Which reward feeds the continuous branch for each pose task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardMap {
    pub text2pose: ContinuousReward,
    pub image2pose: ContinuousReward,
}

impl Default for RewardMap {
    fn default() -> Self {
        Self {
            text2pose: ContinuousReward::Semantic,
            image2pose: ContinuousReward::Joint,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub delta_joint: f64,
    /// Weight of the text reward in the discrete total on qa tasks.
    pub w_text: f64,
    pub map: RewardMap,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            delta_joint: 1e-3,
            w_text: 1.0,
            map: RewardMap::default(),
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_joint > 0.0) {
            return Err(Error::Config {
                key: "reward.delta_joint".into(),
                reason: "must be positive".into(),
            });
        }
        if !self.w_text.is_finite() {
            return Err(Error::Config {
                key: "reward.w_text".into(),
                reason: "must be finite".into(),
            });
        }
        if self.map.image2pose == ContinuousReward::Semantic {
            return Err(Error::Config {
                key: "reward.map.image2pose".into(),
                reason: "semantic reward needs a text prompt".into(),
            });
        }
        Ok(())
    }

    pub fn continuous_for(&self, task: TaskKind) -> Option<ContinuousReward> {
        match task {
            TaskKind::Text2Pose => Some(self.map.text2pose),
            TaskKind::Image2Pose => Some(self.map.image2pose),
            TaskKind::Qa => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_joint: Option<f64>,
    pub r_semantic: Option<f64>,
    pub r_format: Option<f64>,
    pub r_text: Option<f64>,
    /// `R_d`, feeds the discrete advantage.
    pub r_discrete: f64,
    /// `R_c`, feeds the continuous advantage; absent without a pose.
    pub r_continuous: Option<f64>,
    /// Set when a reward could not be evaluated on finite values.
    pub flagged: bool,
}

impl RewardBreakdown {
    /// Member of the continuous-advantage set: a pose was scored and the
    /// answer format is correct.
    pub fn in_v_set(&self) -> bool {
        self.r_continuous.is_some() && self.r_format == Some(1.0)
    }
}

/// Source of rewards for the trainer.
pub trait Scorer {
    fn score(&self, task: &TaskInstance, response: &HybridResponse) -> Result<RewardBreakdown>;
}

/// Scores candidates on the synthetic environment.
#[derive(Clone, Debug)]
pub struct EnvScorer<'a> {
    env: &'a Environment,
    config: RewardConfig,
    embedder: ToyTextEmbedder,
}

impl<'a> EnvScorer<'a> {
    pub fn new(env: &'a Environment, config: RewardConfig) -> Self {
        Self {
            embedder: ToyTextEmbedder::new(&env.vocab),
            env,
            config,
        }
    }
}

impl Scorer for EnvScorer<'_> {
    fn score(&self, task: &TaskInstance, response: &HybridResponse) -> Result<RewardBreakdown> {
        score_candidate(self.env, &self.config, &self.embedder, task, response)
    }
}

pub fn score_candidate(
    env: &Environment,
    cfg: &RewardConfig,
    embedder: &ToyTextEmbedder,
    task: &TaskInstance,
    response: &HybridResponse,
) -> Result<RewardBreakdown> {
    let kind = task.query.task;
    let mut out = RewardBreakdown {
        r_format: Some(format_reward(&response.tokens, &env.vocab, kind)),
        ..RewardBreakdown::default()
    };
    if kind == TaskKind::Qa {
        let gt = task
            .gt_answer
            .as_ref()
            .ok_or_else(|| Error::Contract("qa task without ground-truth answer".into()))?;
        let pred: Vec<TokenId> = response
            .tokens
            .iter()
            .copied()
            .take_while(|&t| t != env.vocab.end())
            .collect();
        out.r_text = Some(text_similarity_reward(&pred, gt, embedder));
    }
    out.r_discrete = out.r_format.unwrap_or(0.0) + cfg.w_text * out.r_text.unwrap_or(0.0);

    if let (Some(pose), Some(which)) = (&response.pose, cfg.continuous_for(kind)) {
        check_len("pose", env.pose_dim(), pose.len())?;
        out.r_continuous = Some(match which {
            ContinuousReward::Joint => {
                let gt = task
                    .gt_pose
                    .as_ref()
                    .ok_or_else(|| Error::Contract("pose task without ground-truth pose".into()))?;
                match joint_location_reward(pose, gt, &env.fk, cfg.delta_joint)? {
                    Some(r) => {
                        out.r_joint = Some(r);
                        r
                    }
                    None => {
                        out.flagged = true;
                        0.0
                    }
                }
            }
            ContinuousReward::Semantic => {
                if !pose.is_finite() {
                    out.flagged = true;
                    0.0
                } else {
                    let r = semantic_alignment_reward(&task.query, pose, &env.retrieval)?;
                    out.r_semantic = Some(r);
                    r
                }
            }
        });
    }
    Ok(out)
}
