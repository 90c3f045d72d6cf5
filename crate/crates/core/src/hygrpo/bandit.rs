//! A one-query, one-dimensional hybrid bandit with a known optimum.

use crate::env::TaskInstance;
use crate::error::Result;
use crate::math::Vector;
use crate::policy::{HybridPolicy, HybridResponse, PolicyConfig, Query, TaskKind};
use crate::rewards::{RewardBreakdown, Scorer};
use crate::vocab::{TokenId, Vocabulary};

const FILLER: TokenId = 2;

/// Pays 1 for a well-formed answer and a Gaussian bump around `peak` for the
/// pose that comes with it.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPeakBandit {
    pub peak: f64,
    pub width: f64,
    vocab: Vocabulary,
}

impl GaussianPeakBandit {
    pub fn new(peak: f64, width: f64) -> Self {
        let tokens = ["<end>", " <POSE>", " hmm"].map(String::from).to_vec();
        Self {
            peak,
            width,
            vocab: Vocabulary::new(tokens, 0, 1),
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn task(&self) -> TaskInstance {
        TaskInstance {
            query: Query::new(vec![FILLER], None, TaskKind::Text2Pose),
            gt_pose: Some(Vector::from(vec![self.peak])),
            gt_answer: None,
            planted: true,
        }
    }

    /// The only well-formed response.
    pub fn canonical_tokens(&self) -> Vec<TokenId> {
        vec![self.vocab.pose(), self.vocab.end()]
    }

    pub fn policy_config() -> PolicyConfig {
        PolicyConfig {
            embed_dim: 4,
            state_dim: 8,
            token_hidden: 8,
            pose_hidden: 8,
            max_len: 4,
            ..PolicyConfig::default()
        }
    }

    pub fn policy(&self, seed: u64) -> Result<HybridPolicy> {
        HybridPolicy::new(Self::policy_config(), &self.vocab, 1, None, seed)
    }

    /// Mean of the pose head on the canonical response.
    pub fn policy_mean(&self, policy: &HybridPolicy) -> Result<f64> {
        let g = policy.pose_head(&self.task().query, &self.canonical_tokens())?;
        Ok(g.mean()[0])
    }
}

impl Scorer for GaussianPeakBandit {
    fn score(&self, _task: &TaskInstance, response: &HybridResponse) -> Result<RewardBreakdown> {
        let format = if response.tokens == self.canonical_tokens() {
            1.0
        } else {
            0.0
        };
        let r_c = response.pose.as_ref().map(|p| {
            let d = p[0] - self.peak;
            if d.is_finite() {
                (-d * d / (2.0 * self.width * self.width)).exp()
            } else {
                0.0
            }
        });
        Ok(RewardBreakdown {
            r_format: Some(format),
            r_discrete: format,
            r_continuous: r_c,
            flagged: response
                .pose
                .as_ref()
                .is_some_and(|p| !p.iter().all(|v| v.is_finite())),
            ..RewardBreakdown::default()
        })
    }
}
