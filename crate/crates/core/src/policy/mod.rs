//! Factorized hybrid policy: an autoregressive token head and a diagonal
//! Gaussian pose head sharing one state encoder.
//!
//! Every forward pass, including sampling, is recorded on a [`Tape`]. Values
//! computed while sampling are therefore bit-identical to the values the loss
//! later differentiates.

mod gaussian;

use std::ops::Deref;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use gaussian::{gaussian_logpdf, kl_categorical, kl_gaussian, sample_pose, GaussianParams};
pub(crate) use gaussian::{kl_categorical_tape, kl_gaussian_tape};

use crate::env::{DualFusion, VisualEncoders};
use crate::error::{check_len, Error, Result};
use crate::math::{Activation, Matrix, Mlp, Tape, Var, Vector};
use crate::rng::{purpose, stream, stream_id};
use crate::vocab::{TokenId, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Text2Pose,
    Image2Pose,
    Qa,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Text2Pose, TaskKind::Image2Pose, TaskKind::Qa];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Text2Pose => "text2pose",
            TaskKind::Image2Pose => "image2pose",
            TaskKind::Qa => "qa",
        }
    }

    pub fn is_pose_task(self) -> bool {
        self != TaskKind::Qa
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Contract(format!("unknown task `{s}`")))
    }
}

/// A task input: prompt tokens plus optional image features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub prompt_tokens: Vec<TokenId>,
    pub image_features: Option<Vector>,
    pub task: TaskKind,
}

impl Query {
    pub fn new(
        prompt_tokens: Vec<TokenId>,
        image_features: Option<Vector>,
        task: TaskKind,
    ) -> Self {
        Self {
            prompt_tokens,
            image_features,
            task,
        }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if let Some(&t) = self
            .prompt_tokens
            .iter()
            .find(|&&t| t as usize >= vocab_size)
        {
            return Err(Error::Contract(format!("token id {t} outside vocabulary")));
        }
        if self.image_features.is_some() != (self.task == TaskKind::Image2Pose) {
            return Err(Error::Contract(
                "image features must be present exactly for image2pose".into(),
            ));
        }
        Ok(())
    }
}

/// One sampled candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridResponse {
    pub tokens: Vec<TokenId>,
    pub pose: Option<Vector>,
    pub logp_discrete: f64,
    /// Present iff `pose` is. A deterministic head reports 0.
    pub logp_continuous: Option<f64>,
    /// Hit `max_len` without emitting the end token.
    pub truncated: bool,
}

impl HybridResponse {
    pub fn total_logp(&self) -> f64 {
        self.logp_discrete + self.logp_continuous.unwrap_or(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseHeadKind {
    Gaussian,
    Deterministic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub embed_dim: usize,
    pub visual_proj_dim: usize,
    pub state_dim: usize,
    pub token_hidden: usize,
    pub pose_hidden: usize,
    pub max_len: usize,
    pub var_floor: f64,
    /// Initial bias of the variance branch before softplus.
    pub var_bias_init: f64,
    pub head: PoseHeadKind,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            embed_dim: 8,
            visual_proj_dim: 4,
            state_dim: 32,
            token_hidden: 32,
            pose_hidden: 32,
            max_len: 16,
            var_floor: 1e-4,
            var_bias_init: 0.0,
            head: PoseHeadKind::Gaussian,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("policy.embed_dim", self.embed_dim),
            ("policy.state_dim", self.state_dim),
            ("policy.token_hidden", self.token_hidden),
            ("policy.pose_hidden", self.pose_hidden),
            ("policy.max_len", self.max_len),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config {
                    key: key.into(),
                    reason: "must be positive".into(),
                });
            }
        }
        if !(self.var_floor > 0.0) {
            return Err(Error::Config {
                key: "policy.var_floor".into(),
                reason: "must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Offsets of each parameter block in the flat vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub token_emb: usize,
    pub pos_emb: usize,
    pub fusion: usize,
    pub backbone: usize,
    pub token_head: usize,
    pub pose_trunk: usize,
    pub pose_mean: usize,
    pub pose_var: usize,
    pub total: usize,
}

impl Layout {
    pub fn token_head_range(&self) -> std::ops::Range<usize> {
        self.token_head..self.pose_trunk
    }

    pub fn pose_head_range(&self) -> std::ops::Range<usize> {
        self.pose_trunk..self.total
    }

    /// Embeddings, visual projections and the backbone.
    pub fn shared_range(&self) -> std::ops::Range<usize> {
        0..self.token_head
    }
}

/// Tape handles for one response, valid on the tape that produced them.
#[derive(Clone, Debug)]
pub struct ResponseVars {
    /// Log-softmax over the vocabulary at each generated position.
    pub step_logprobs: Vec<Var>,
    pub logp_discrete: Var,
    /// Mean and variance of the pose head.
    pub gaussian: Option<(Var, Var)>,
    pub logp_continuous: Option<Var>,
}

/// Plain values of a response under some policy.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub logp_discrete: f64,
    pub logp_continuous: Option<f64>,
    pub step_logprobs: Vec<Vec<f64>>,
    pub gaussian: Option<GaussianParams>,
}

impl Evaluation {
    pub fn from_tape(tape: &Tape, vars: &ResponseVars) -> Result<Self> {
        let gaussian = match vars.gaussian {
            Some((m, v)) => Some(GaussianParams::new(
                tape.value(m).to_vec().into(),
                tape.value(v).to_vec().into(),
            )?),
            None => None,
        };
        Ok(Self {
            logp_discrete: tape.scalar(vars.logp_discrete),
            logp_continuous: vars.logp_continuous.map(|v| tape.scalar(v)),
            step_logprobs: vars
                .step_logprobs
                .iter()
                .map(|&v| tape.value(v).to_vec())
                .collect(),
            gaussian,
        })
    }
}

struct Episode {
    context: Var,
    prefix_sum: Option<Var>,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridPolicy {
    config: PolicyConfig,
    vocab_size: usize,
    end: TokenId,
    trigger: TokenId,
    pose_dim: usize,
    token_emb: Matrix,
    pos_emb: Matrix,
    fusion: Option<DualFusion>,
    backbone: Mlp,
    token_head: Mlp,
    pose_trunk: Mlp,
    pose_mean: Mlp,
    pose_var: Mlp,
    layout: Layout,
}

impl HybridPolicy {
    /// Builds a freshly initialised policy. `visual` enables image queries.
    pub fn new(
        config: PolicyConfig,
        vocab: &Vocabulary,
        pose_dim: usize,
        visual: Option<VisualEncoders>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if pose_dim == 0 {
            return Err(Error::Config {
                key: "pose_dim".into(),
                reason: "must be positive".into(),
            });
        }
        let e = config.embed_dim;
        let sub = |k: u64| stream_id(seed, &[purpose::INIT, k]);
        let mut rng = stream(seed, &[purpose::INIT, 0]);
        let mut table = |rows: usize| Matrix::from_fn(rows, e, |_, _| rng.random_range(-1.0..=1.0));
        let token_emb = table(vocab.len());
        let pos_emb = table(config.max_len + 1);
        let fusion = visual.map(|enc| {
            DualFusion::new(
                enc,
                config.visual_proj_dim,
                &mut stream(seed, &[purpose::INIT, 1]),
            )
        });
        let visual_width = fusion.as_ref().map_or(0, |f| f.output_width());
        let state_in = 3 * e + visual_width;
        let (s, th, ph) = (config.state_dim, config.token_hidden, config.pose_hidden);
        let backbone = Mlp::new(&[state_in, s], &[Activation::Tanh], sub(2));
        let token_head = Mlp::new(
            &[s, th, vocab.len()],
            &[Activation::Tanh, Activation::Identity],
            sub(3),
        );
        let pose_trunk = Mlp::new(&[s, ph], &[Activation::Tanh], sub(4));
        let pose_mean = Mlp::new(&[ph, pose_dim], &[Activation::Identity], sub(5));
        let mut pose_var = Mlp::new(&[ph, pose_dim], &[Activation::Softplus], sub(6));
        for b in pose_var.layers_mut()[0].bias.iter_mut() {
            *b = config.var_bias_init;
        }

        let mut off = 0;
        let mut next = |n: usize| {
            let at = off;
            off += n;
            at
        };
        let layout = Layout {
            token_emb: next(token_emb.as_slice().len()),
            pos_emb: next(pos_emb.as_slice().len()),
            fusion: next(fusion.as_ref().map_or(0, |f| f.num_params())),
            backbone: next(backbone.num_params()),
            token_head: next(token_head.num_params()),
            pose_trunk: next(pose_trunk.num_params()),
            pose_mean: next(pose_mean.num_params()),
            pose_var: next(pose_var.num_params()),
            total: 0,
        };
        let layout = Layout {
            total: off,
            ..layout
        };
        Ok(Self {
            config,
            vocab_size: vocab.len(),
            end: vocab.end(),
            trigger: vocab.pose(),
            pose_dim,
            token_emb,
            pos_emb,
            fusion,
            backbone,
            token_head,
            pose_trunk,
            pose_mean,
            pose_var,
            layout,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn pose_dim(&self) -> usize {
        self.pose_dim
    }

    pub fn end_token(&self) -> TokenId {
        self.end
    }

    pub fn trigger_token(&self) -> TokenId {
        self.trigger
    }

    pub fn head_kind(&self) -> PoseHeadKind {
        self.config.head
    }

    pub fn set_head_kind(&mut self, head: PoseHeadKind) {
        self.config.head = head;
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layout.total);
        out.extend_from_slice(self.token_emb.as_slice());
        out.extend_from_slice(self.pos_emb.as_slice());
        if let Some(f) = &self.fusion {
            f.flatten_into(&mut out);
        }
        for net in self.mlps() {
            net.flatten_into(&mut out);
        }
        out
    }

    pub fn restore(&mut self, flat: &[f64]) -> Result<()> {
        check_len("policy_restore", self.layout.total, flat.len())?;
        if !flat.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("policy parameters".into()));
        }
        let l = self.layout.clone();
        self.token_emb
            .as_mut_slice()
            .copy_from_slice(&flat[l.token_emb..l.pos_emb]);
        self.pos_emb
            .as_mut_slice()
            .copy_from_slice(&flat[l.pos_emb..l.fusion]);
        if let Some(f) = &mut self.fusion {
            f.restore(&flat[l.fusion..l.backbone])?;
        }
        self.backbone.restore(&flat[l.backbone..l.token_head])?;
        self.token_head.restore(&flat[l.token_head..l.pose_trunk])?;
        self.pose_trunk.restore(&flat[l.pose_trunk..l.pose_mean])?;
        self.pose_mean.restore(&flat[l.pose_mean..l.pose_var])?;
        self.pose_var.restore(&flat[l.pose_var..l.total])?;
        Ok(())
    }

    /// Read-only frozen copy.
    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot(Arc::new(self.clone()))
    }

    fn mlps(&self) -> [&Mlp; 5] {
        [
            &self.backbone,
            &self.token_head,
            &self.pose_trunk,
            &self.pose_mean,
            &self.pose_var,
        ]
    }

    pub fn new_tape(&self) -> Tape {
        Tape::new(self.layout.total)
    }

    fn check_query(&self, q: &Query) -> Result<()> {
        q.validate(self.vocab_size)?;
        if q.image_features.is_some() && self.fusion.is_none() {
            return Err(Error::Contract("policy has no visual branch".into()));
        }
        Ok(())
    }

    fn embed_sum(&self, tape: &mut Tape, tokens: &[TokenId]) -> Result<Option<Var>> {
        let e = self.config.embed_dim;
        let table = tape.param(self.layout.token_emb, self.token_emb.as_slice());
        let mut acc: Option<Var> = None;
        for &t in tokens {
            let row = tape.slice(table, t as usize * e, e)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, row)?,
                None => row,
            });
        }
        Ok(acc)
    }

    fn begin(&self, tape: &mut Tape, q: &Query) -> Result<Episode> {
        self.check_query(q)?;
        let e = self.config.embed_dim;
        let prompt = match self.embed_sum(tape, &q.prompt_tokens)? {
            Some(s) => tape.scale(s, 1.0 / q.prompt_tokens.len() as f64),
            None => tape.constant(vec![0.0; e]),
        };
        let visual = match (&self.fusion, &q.image_features) {
            (Some(f), Some(x)) => Some(f.fuse_tape(tape, x, self.layout.fusion)?),
            (Some(f), None) => Some(tape.constant(vec![0.0; f.output_width()])),
            (None, _) => None,
        };
        let context = match visual {
            Some(v) => tape.concat(&[prompt, v]),
            None => prompt,
        };
        Ok(Episode {
            context,
            prefix_sum: None,
            len: 0,
        })
    }

    fn push(&self, tape: &mut Tape, ep: &mut Episode, token: TokenId) -> Result<()> {
        let row = self
            .embed_sum(tape, &[token])?
            .expect("one token gives one row");
        ep.prefix_sum = Some(match ep.prefix_sum {
            Some(s) => tape.add(s, row)?,
            None => row,
        });
        ep.len += 1;
        Ok(())
    }

    fn state(&self, tape: &mut Tape, ep: &Episode) -> Result<Var> {
        let e = self.config.embed_dim;
        let prefix = match ep.prefix_sum {
            Some(s) => tape.scale(s, 1.0 / ep.len as f64),
            None => tape.constant(vec![0.0; e]),
        };
        let table = tape.param(self.layout.pos_emb, self.pos_emb.as_slice());
        let pos = tape.slice(table, ep.len * e, e)?;
        let input = tape.concat(&[ep.context, prefix, pos]);
        self.backbone
            .forward_tape(tape, input, self.layout.backbone)
    }

    fn token_logprobs(&self, tape: &mut Tape, state: Var) -> Result<Var> {
        let logits = self
            .token_head
            .forward_tape(tape, state, self.layout.token_head)?;
        Ok(tape.log_softmax(logits))
    }

    fn gaussian_vars(&self, tape: &mut Tape, state: Var) -> Result<(Var, Var)> {
        let h = self
            .pose_trunk
            .forward_tape(tape, state, self.layout.pose_trunk)?;
        let mean = self
            .pose_mean
            .forward_tape(tape, h, self.layout.pose_mean)?;
        let raw = self.pose_var.forward_tape(tape, h, self.layout.pose_var)?;
        let var = tape.add_scalar(raw, self.config.var_floor);
        Ok((mean, var))
    }

    fn trigger_count(&self, tokens: &[TokenId]) -> usize {
        tokens.iter().filter(|&&t| t == self.trigger).count()
    }

    /// Records the pose branch for a completed token sequence and returns
    /// `(gaussian, logp_continuous)` handles.
    fn pose_vars(&self, tape: &mut Tape, ep: &Episode, pose: &[f64]) -> Result<((Var, Var), Var)> {
        check_len("pose", self.pose_dim, pose.len())?;
        let state = self.state(tape, ep)?;
        let (mean, var) = self.gaussian_vars(tape, state)?;
        let logp = match self.config.head {
            PoseHeadKind::Gaussian => gaussian::logpdf_tape(tape, pose, mean, var)?,
            PoseHeadKind::Deterministic => tape.constant(vec![0.0]),
        };
        Ok(((mean, var), logp))
    }

    fn sample_tokens(
        &self,
        tape: &mut Tape,
        ep: &mut Episode,
        rng: &mut impl Rng,
    ) -> Result<(Vec<TokenId>, Vec<Var>, Var)> {
        let mut tokens = Vec::new();
        let mut steps = Vec::new();
        let mut picks = Vec::new();
        while tokens.len() < self.config.max_len {
            let state = self.state(tape, ep)?;
            let lp = self.token_logprobs(tape, state)?;
            let tok = sample_categorical(tape.value(lp), rng);
            picks.push(tape.slice(lp, tok, 1)?);
            steps.push(lp);
            self.push(tape, ep, tok as TokenId)?;
            tokens.push(tok as TokenId);
            if tok as TokenId == self.end {
                break;
            }
        }
        let joined = tape.concat(&picks);
        let logp = tape.sum(joined);
        Ok((tokens, steps, logp))
    }

    /// Samples a full response and leaves its computation on `tape`.
    pub fn sample_on_tape(
        &self,
        tape: &mut Tape,
        q: &Query,
        rng: &mut impl Rng,
    ) -> Result<(HybridResponse, ResponseVars)> {
        let mut ep = self.begin(tape, q)?;
        let (tokens, step_logprobs, logp_d) = self.sample_tokens(tape, &mut ep, rng)?;
        let truncated = tokens.last() != Some(&self.end);
        let mut vars = ResponseVars {
            step_logprobs,
            logp_discrete: logp_d,
            gaussian: None,
            logp_continuous: None,
        };
        let mut pose = None;
        if self.trigger_count(&tokens) == 1 {
            let state = self.state(tape, &ep)?;
            let (mean, var) = self.gaussian_vars(tape, state)?;
            let p: Vector = match self.config.head {
                PoseHeadKind::Gaussian => tape
                    .value(mean)
                    .iter()
                    .zip(tape.value(var))
                    .map(|(m, v)| m + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
                PoseHeadKind::Deterministic => tape.value(mean).to_vec().into(),
            };
            let logp = match self.config.head {
                PoseHeadKind::Gaussian => gaussian::logpdf_tape(tape, &p, mean, var)?,
                PoseHeadKind::Deterministic => tape.constant(vec![0.0]),
            };
            vars.gaussian = Some((mean, var));
            vars.logp_continuous = Some(logp);
            pose = Some(p);
        }
        let response = HybridResponse {
            logp_discrete: tape.scalar(vars.logp_discrete),
            logp_continuous: vars.logp_continuous.map(|v| tape.scalar(v)),
            tokens,
            pose,
            truncated,
        };
        Ok((response, vars))
    }

    /// Teacher-forced recording of an existing response.
    pub fn record(
        &self,
        tape: &mut Tape,
        q: &Query,
        tokens: &[TokenId],
        pose: Option<&[f64]>,
    ) -> Result<ResponseVars> {
        if tokens.is_empty() || tokens.len() > self.config.max_len {
            return Err(Error::Contract(format!(
                "response length {} outside 1..={}",
                tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::Contract(format!("token id {t} outside vocabulary")));
        }
        if pose.is_some() != (self.trigger_count(tokens) == 1) {
            return Err(Error::Contract(
                "pose must be present exactly when the trigger appears once".into(),
            ));
        }
        let mut ep = self.begin(tape, q)?;
        let mut steps = Vec::with_capacity(tokens.len());
        let mut picks = Vec::with_capacity(tokens.len());
        for &tok in tokens {
            let state = self.state(tape, &ep)?;
            let lp = self.token_logprobs(tape, state)?;
            picks.push(tape.slice(lp, tok as usize, 1)?);
            steps.push(lp);
            self.push(tape, &mut ep, tok)?;
        }
        let joined = tape.concat(&picks);
        let logp_d = tape.sum(joined);
        let (gaussian, logp_c) = match pose {
            Some(p) => {
                let (g, lp) = self.pose_vars(tape, &ep, p)?;
                (Some(g), Some(lp))
            }
            None => (None, None),
        };
        Ok(ResponseVars {
            step_logprobs: steps,
            logp_discrete: logp_d,
            gaussian,
            logp_continuous: logp_c,
        })
    }

    pub fn sample(&self, q: &Query, rng: &mut impl Rng) -> Result<HybridResponse> {
        let mut tape = self.new_tape();
        Ok(self.sample_on_tape(&mut tape, q, rng)?.0)
    }

    /// Token sequence, its log-probability, and whether it was truncated.
    pub fn sample_discrete(
        &self,
        q: &Query,
        rng: &mut impl Rng,
    ) -> Result<(Vec<TokenId>, f64, bool)> {
        let mut tape = self.new_tape();
        let mut ep = self.begin(&mut tape, q)?;
        let (tokens, _, logp) = self.sample_tokens(&mut tape, &mut ep, rng)?;
        let truncated = tokens.last() != Some(&self.end);
        Ok((tokens, tape.scalar(logp), truncated))
    }

    pub fn evaluate(&self, q: &Query, response: &HybridResponse) -> Result<Evaluation> {
        let mut tape = self.new_tape();
        let vars = self.record(&mut tape, q, &response.tokens, response.pose.as_deref())?;
        Evaluation::from_tape(&tape, &vars)
    }

    /// Backbone output for `q` after `prefix`.
    pub fn encode_state(&self, q: &Query, prefix: &[TokenId]) -> Result<Vector> {
        let mut tape = self.new_tape();
        let mut ep = self.begin(&mut tape, q)?;
        for &t in prefix {
            if t as usize >= self.vocab_size {
                return Err(Error::Contract(format!("token id {t} outside vocabulary")));
            }
            self.push(&mut tape, &mut ep, t)?;
        }
        if ep.len > self.config.max_len {
            return Err(Error::Contract("prefix longer than max_len".into()));
        }
        let s = self.state(&mut tape, &ep)?;
        Ok(tape.value(s).to_vec().into())
    }

    /// Next-token log-probabilities after `prefix`.
    pub fn token_distribution(&self, q: &Query, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut tape = self.new_tape();
        let mut ep = self.begin(&mut tape, q)?;
        for &t in prefix {
            self.push(&mut tape, &mut ep, t)?;
        }
        if ep.len > self.config.max_len {
            return Err(Error::Contract("prefix longer than max_len".into()));
        }
        let s = self.state(&mut tape, &ep)?;
        let lp = self.token_logprobs(&mut tape, s)?;
        Ok(tape.value(lp).to_vec())
    }

    /// Pose distribution given a response containing exactly one trigger.
    pub fn pose_head(&self, q: &Query, tokens: &[TokenId]) -> Result<GaussianParams> {
        if self.trigger_count(tokens) != 1 {
            return Err(Error::Contract(
                "pose head needs exactly one trigger token".into(),
            ));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::Contract("response longer than max_len".into()));
        }
        let mut tape = self.new_tape();
        let mut ep = self.begin(&mut tape, q)?;
        for &t in tokens {
            self.push(&mut tape, &mut ep, t)?;
        }
        let s = self.state(&mut tape, &ep)?;
        let (m, v) = self.gaussian_vars(&mut tape, s)?;
        GaussianParams::new(tape.value(m).to_vec().into(), tape.value(v).to_vec().into())
    }

    /// Per-position categorical KL summed over the sampled sequence.
    pub fn kl_discrete(
        &self,
        reference: &HybridPolicy,
        q: &Query,
        tokens: &[TokenId],
    ) -> Result<f64> {
        let pose = (self.trigger_count(tokens) == 1).then(|| vec![0.0; self.pose_dim]);
        let mine = {
            let mut tape = self.new_tape();
            let vars = self.record(&mut tape, q, tokens, pose.as_deref())?;
            Evaluation::from_tape(&tape, &vars)?
        };
        let theirs = {
            let mut tape = reference.new_tape();
            let vars = reference.record(&mut tape, q, tokens, pose.as_deref())?;
            Evaluation::from_tape(&tape, &vars)?
        };
        let mut acc = 0.0;
        for (a, b) in mine.step_logprobs.iter().zip(&theirs.step_logprobs) {
            acc += kl_categorical(a, b)?;
        }
        Ok(acc)
    }
}

/// Inverse-CDF draw from a log-probability vector.
fn sample_categorical(logp: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &l) in logp.iter().enumerate() {
        let p = l.exp();
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

/// Frozen policy used as the reference in ratios and KL terms.
#[derive(Clone, Debug)]
pub struct PolicySnapshot(Arc<HybridPolicy>);

impl PolicySnapshot {
    pub fn policy(&self) -> &HybridPolicy {
        &self.0
    }
}

impl Deref for PolicySnapshot {
    type Target = HybridPolicy;

    fn deref(&self) -> &HybridPolicy {
        &self.0
    }
}

impl PartialEq for PolicySnapshot {
    fn eq(&self, other: &Self) -> bool {
        self.0 == other.0
    }
}

#[cfg(test)]
mod tests;
