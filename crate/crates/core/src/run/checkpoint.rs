//! Binary checkpoints: magic, format version, a JSON header, then
//! little-endian `f64` blocks and a SHA-256 trailer over everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::math::AdamW;
use crate::policy::PoseHeadKind;

const MAGIC: &[u8; 8] = b"HYGRPOCK";
pub const FORMAT_VERSION: u32 = 1;

/// Random streams are keyed by `(seed, step, ...)`, so these two numbers are
/// the complete generator state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config_hash: String,
    config: RunConfig,
    step: u64,
    head: PoseHeadKind,
    n_params: usize,
    adam_t: u64,
    has_reference: bool,
    rng: RngState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub config_hash: String,
    /// Number of completed training steps.
    pub step: u64,
    pub head: PoseHeadKind,
    pub params: Vec<f64>,
    pub optimizer: AdamW,
    /// Parameters of a fixed reference policy.
    pub reference: Option<Vec<f64>>,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n = self.params.len();
        if self.optimizer.m.len() != n
            || self.optimizer.v.len() != n
            || self.reference.as_ref().is_some_and(|r| r.len() != n)
        {
            return Err(Error::Checkpoint("blocks differ in length".into()));
        }
        let header = serde_json::to_vec(&Header {
            version: FORMAT_VERSION,
            config_hash: self.config_hash.clone(),
            config: self.config.clone(),
            step: self.step,
            head: self.head,
            n_params: n,
            adam_t: self.optimizer.t,
            has_reference: self.reference.is_some(),
            rng: self.rng,
        })?;
        let blocks = 3 + usize::from(self.reference.is_some());
        let mut out = Vec::with_capacity(20 + header.len() + 8 * n * blocks + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let mut put = |xs: &[f64]| {
            xs.iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes()))
        };
        put(&self.params);
        put(&self.optimizer.m);
        put(&self.optimizer.v);
        if let Some(r) = &self.reference {
            put(r);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.into());
        if bytes.len() < 20 + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(bad("checksum mismatch, file is corrupted"));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| bad("header length out of range"))?;
        let header: Header = serde_json::from_slice(&body[20..header_end])?;
        if header.version != version {
            return Err(bad("header version disagrees with the file tag"));
        }
        let n = header.n_params;
        let blocks = 3 + usize::from(header.has_reference);
        if body.len() - header_end != 8 * n * blocks {
            return Err(bad("payload size does not match the header"));
        }
        let mut floats = body[header_end..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut take = || floats.by_ref().take(n).collect::<Vec<f64>>();
        let params = take();
        let m = take();
        let v = take();
        let reference = header.has_reference.then(take);
        Ok(Self {
            optimizer: AdamW {
                config: header.config.trainer.adam(),
                m,
                v,
                t: header.adam_t,
            },
            config: header.config,
            config_hash: header.config_hash,
            step: header.step,
            head: header.head,
            params,
            reference,
            rng: header.rng,
        })
    }

    /// Writes via a temporary file and a rename, so a crash never leaves a
    /// half-written checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Rejects a checkpoint written under another config unless `force`.
    pub fn check_config(&self, config: &RunConfig, force: bool) -> Result<()> {
        let current = config.hash();
        if current != self.config_hash && !force {
            return Err(Error::ConfigHash {
                checkpoint: self.config_hash.clone(),
                current,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::AdamWConfig;

    fn sample() -> Checkpoint {
        let config = RunConfig::default();
        let n = 7;
        let f = |k: f64| {
            (0..n)
                .map(|i| (i as f64 + k).sin() * 1e-3)
                .collect::<Vec<_>>()
        };
        Checkpoint {
            config_hash: config.hash(),
            config,
            step: 42,
            head: PoseHeadKind::Gaussian,
            params: f(0.0),
            optimizer: AdamW {
                config: AdamWConfig::default(),
                m: f(1.0),
                v: f(2.0).iter().map(|x| x * x).collect(),
                t: 42,
            },
            reference: Some(f(3.0)),
            rng: RngState {
                seed: 0,
                next_step: 42,
            },
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn save_load_save() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        sample().save(&a).unwrap();
        Checkpoint::load(&a).unwrap().save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        for at in [0, 30, bytes.len() / 2, bytes.len() - 1] {
            let mut b = bytes.clone();
            b[at] ^= 0x40;
            assert!(Checkpoint::from_bytes(&b).is_err());
        }
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 9]).is_err());
        assert!(Checkpoint::from_bytes(&[]).is_err());
    }

    #[test]
    fn version_mismatch_names_both() {
        let mut b = sample().to_bytes().unwrap();
        b[8..12].copy_from_slice(&7u32.to_le_bytes());
        let e = Checkpoint::from_bytes(&b).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("v7") && msg.contains("v1"), "{msg}");
    }

    #[test]
    fn config_hash_is_checked() {
        let c = sample();
        let other = RunConfig {
            seed: 9,
            ..RunConfig::default()
        };
        assert!(c.check_config(&other, false).is_err());
        assert!(c.check_config(&other, true).is_ok());
        assert!(c.check_config(&RunConfig::default(), false).is_ok());
    }
}
