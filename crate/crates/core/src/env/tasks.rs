use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::kinematics::KinematicChain;
use crate::error::{Error, Result};
use crate::math::{Matrix, Vector};
use crate::policy::{Query, TaskKind};
use crate::rewards::ToyRetrievalEncoders;
use crate::vocab::{TokenId, Vocabulary, PERIOD};

/// Linear "camera": `features = A · joints + σ · noise`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageChannel {
    a: Matrix,
    sigma: f64,
}

impl ImageChannel {
    /// Draws a Gaussian `feature_dim × 3 n_joints` matrix and checks that it
    /// has full column rank, so joints are recoverable from noiseless features.
    pub fn new(
        fk: &KinematicChain,
        feature_dim: usize,
        sigma: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let cols = 3 * fk.n_joints();
        if feature_dim < cols {
            return Err(Error::Config {
                key: "env.feature_dim".into(),
                reason: format!("must be at least 3 * n_joints = {cols}"),
            });
        }
        let scale = 1.0 / (feature_dim as f64).sqrt();
        let a = Matrix::from_fn(feature_dim, cols, |_, _| {
            rng.sample::<f64, _>(StandardNormal) * scale
        });
        let channel = Self { a, sigma };
        if channel.rank() != cols {
            return Err(Error::Contract("image channel is rank deficient".into()));
        }
        Ok(channel)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.a
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn rank(&self) -> usize {
        DMatrix::from_row_slice(self.a.rows(), self.a.cols(), self.a.as_slice())
            .svd(false, false)
            .rank(1e-10)
    }

    pub fn encode(&self, joints: &[f64], rng: &mut impl Rng) -> Result<Vector> {
        let clean = self.a.matvec(joints)?;
        Ok(clean
            .iter()
            .map(|v| v + self.sigma * rng.sample::<f64, _>(StandardNormal))
            .collect())
    }
}

/// One synthetic training or evaluation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub query: Query,
    pub gt_pose: Option<Vector>,
    pub gt_answer: Option<Vec<TokenId>>,
    /// Set when `gt_pose` was constructed to be an exact reward optimum.
    pub planted: bool,
}

/// Question/answer pairs written as surface strings.
const QA_BANK: &[(&[&str], &[&str])] = &[
    (&["What color is", " the sky"], &["Blue"]),
    (&["What color is", " grass"], &["Green"]),
    (&["What color is", " snow"], &["White"]),
    (&["What color is", " the sun"], &["Yellow"]),
    (&["What color is", " a car"], &["Blue"]),
    (&["How many", " hands", " does a person have"], &["Two"]),
    (&["How many", " legs", " does a person have"], &["Two"]),
    (&["How many", " wheels", " does a car have"], &["Four"]),
    (&["How many", " legs", " does a cat have"], &["Four"]),
    (&["Is", " a cat", " an animal"], &["Yes", " it is"]),
    (&["Is", " a car", " an animal"], &["No"]),
    (&["Is", " the sun", " hot"], &["Yes", " it is"]),
    (&["Is", " snow", " hot"], &["No"]),
    (&["Is", " grass", " an animal"], &["No"]),
    (&["Is", " the sky", " hot"], &["No"]),
    (&["Is", " a cat", " hot"], &["No"]),
];

const DESCRIPTORS: &[&str] = &[
    " raise", " lower", " left", " right", " arm", " leg", " bend", " knee", " twist", " lean",
    " forward", " back",
];

const IMAGE_PROMPT: &str = "Estimate the SMPL pose of the person in the image";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: Vec<TokenId>,
    pub answer: Vec<TokenId>,
}

/// Task mixture, as proportions of each batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskMix {
    pub text2pose: f64,
    pub image2pose: f64,
    pub qa: f64,
}

impl Default for TaskMix {
    fn default() -> Self {
        Self {
            text2pose: 0.4,
            image2pose: 0.4,
            qa: 0.2,
        }
    }
}

impl TaskMix {
    pub fn weight(&self, kind: TaskKind) -> f64 {
        match kind {
            TaskKind::Text2Pose => self.text2pose,
            TaskKind::Image2Pose => self.image2pose,
            TaskKind::Qa => self.qa,
        }
    }

    /// Splits `batch` queries across tasks by largest remainder. Every task
    /// with positive weight gets at least one query when `batch` allows it.
    pub fn counts(&self, batch: usize) -> Vec<(TaskKind, usize)> {
        let kinds: Vec<TaskKind> = TaskKind::ALL
            .into_iter()
            .filter(|&k| self.weight(k) > 0.0)
            .collect();
        if kinds.is_empty() || batch == 0 {
            return Vec::new();
        }
        let total: f64 = kinds.iter().map(|&k| self.weight(k)).sum();
        let reserved = if batch >= kinds.len() { 1 } else { 0 };
        let free = batch - reserved * kinds.len();
        let exact: Vec<f64> = kinds
            .iter()
            .map(|&k| self.weight(k) / total * free as f64)
            .collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut left = free - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..kinds.len()).collect();
        order.sort_by(|&i, &j| {
            let (ri, rj) = (exact[i] - exact[i].floor(), exact[j] - exact[j].floor());
            rj.partial_cmp(&ri).unwrap().then(i.cmp(&j))
        });
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        kinds
            .into_iter()
            .zip(counts)
            .map(|(k, c)| (k, c + reserved))
            .filter(|&(_, c)| c > 0)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Seed for the fixed encoders and channels (not the training stream).
    pub seed: u64,
    pub n_joints: usize,
    pub feature_dim: usize,
    pub coarse_dim: usize,
    /// Noise scale σ of the image channel.
    pub sigma: f64,
    /// Per-coordinate std of image-to-pose ground-truth poses.
    pub pose_std: f64,
    pub prompt_min: usize,
    pub prompt_max: usize,
    pub retrieval_dim: usize,
    pub mix: TaskMix,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            n_joints: 4,
            feature_dim: 16,
            coarse_dim: 4,
            sigma: 0.01,
            pose_std: 0.5,
            prompt_min: 2,
            prompt_max: 4,
            retrieval_dim: 16,
            mix: TaskMix::default(),
        }
    }
}

/// Everything fixed about the synthetic world: vocabulary, kinematics, the
/// image channel, the frozen encoders and the QA bank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub config: EnvConfig,
    pub vocab: Vocabulary,
    pub fk: KinematicChain,
    pub channel: ImageChannel,
    pub retrieval: ToyRetrievalEncoders,
    pub visual: super::VisualEncoders,
    pub qa_bank: Vec<QaPair>,
    descriptors: Vec<TokenId>,
    image_prompt: TokenId,
}

impl Environment {
    pub fn new(config: EnvConfig) -> Result<Self> {
        if config.prompt_min == 0 || config.prompt_min > config.prompt_max {
            return Err(Error::Config {
                key: "env.prompt_min".into(),
                reason: "need 1 <= prompt_min <= prompt_max".into(),
            });
        }
        if config.sigma < 0.0 || config.pose_std <= 0.0 {
            return Err(Error::Config {
                key: "env.sigma".into(),
                reason: "sigma must be >= 0 and pose_std > 0".into(),
            });
        }
        let vocab = Vocabulary::standard();
        let fk = KinematicChain::new(config.n_joints);
        let mut rng = crate::rng::stream(config.seed, &[crate::rng::purpose::ENV]);
        let channel = ImageChannel::new(&fk, config.feature_dim, config.sigma, &mut rng)?;
        let retrieval =
            ToyRetrievalEncoders::new(vocab.len(), fk.pose_dim(), config.retrieval_dim, &mut rng)?;
        let visual = super::VisualEncoders::new(&channel, config.coarse_dim, &mut rng);
        let lookup = |s: &str| vocab.id(s).expect("token in standard vocabulary");
        let qa_bank = QA_BANK
            .iter()
            .map(|(q, a)| QaPair {
                question: q.iter().map(|s| lookup(s)).collect(),
                answer: a.iter().map(|s| lookup(s)).chain([PERIOD]).collect(),
            })
            .collect();
        let descriptors = DESCRIPTORS.iter().map(|s| lookup(s)).collect();
        let image_prompt = lookup(IMAGE_PROMPT);
        Ok(Self {
            config,
            vocab,
            fk,
            channel,
            retrieval,
            visual,
            qa_bank,
            descriptors,
            image_prompt,
        })
    }

    pub fn pose_dim(&self) -> usize {
        self.fk.pose_dim()
    }

    pub fn generate_task(&self, kind: TaskKind, rng: &mut impl Rng) -> Result<TaskInstance> {
        match kind {
            TaskKind::Text2Pose => {
                let len = rng.random_range(self.config.prompt_min..=self.config.prompt_max);
                let prompt: Vec<TokenId> = (0..len)
                    .map(|_| self.descriptors[rng.random_range(0..self.descriptors.len())])
                    .collect();
                let gt = self.retrieval.plant(&prompt)?;
                Ok(TaskInstance {
                    query: Query::new(prompt, None, TaskKind::Text2Pose),
                    gt_pose: Some(gt),
                    gt_answer: None,
                    planted: true,
                })
            }
            TaskKind::Image2Pose => {
                let gt: Vector = (0..self.pose_dim())
                    .map(|_| self.config.pose_std * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let joints = self.fk.forward_flat(&gt)?;
                let features = self.channel.encode(&joints, rng)?;
                Ok(TaskInstance {
                    query: Query::new(
                        vec![self.image_prompt],
                        Some(features),
                        TaskKind::Image2Pose,
                    ),
                    gt_pose: Some(gt),
                    gt_answer: None,
                    planted: false,
                })
            }
            TaskKind::Qa => {
                let pair = &self.qa_bank[rng.random_range(0..self.qa_bank.len())];
                Ok(TaskInstance {
                    query: Query::new(pair.question.clone(), None, TaskKind::Qa),
                    gt_pose: None,
                    gt_answer: Some(pair.answer.clone()),
                    planted: false,
                })
            }
        }
    }

    /// A batch laid out task by task according to `mix`.
    pub fn generate_batch(
        &self,
        mix: &TaskMix,
        batch: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<TaskInstance>> {
        let mut out = Vec::with_capacity(batch);
        for (kind, n) in mix.counts(batch) {
            for _ in 0..n {
                out.push(self.generate_task(kind, rng)?);
            }
        }
        Ok(out)
    }
}

/// Writes one JSON record per line.
pub fn export_tasks(tasks: &[TaskInstance], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in tasks {
        serde_json::to_writer(&mut f, t)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn import_tasks(path: &Path) -> Result<Vec<TaskInstance>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
