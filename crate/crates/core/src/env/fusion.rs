//! Two-encoder visual fusion with separate learned projections.
//!
//! The coarse encoder summarises the whole image into one low-dimensional
//! token; the fine encoder recovers one token per joint. Each family gets its
//! own projection into the backbone width and the projected tokens are
//! concatenated token-wise. Channels are never concatenated before projection.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::tasks::ImageChannel;
use crate::error::{check_len, Result};
use crate::math::{Matrix, Tape, Var, Vector};

/// Frozen stand-ins for the two visual encoders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualEncoders {
    /// `coarse_dim × feature_dim`; output passes through `tanh`.
    coarse: Matrix,
    /// `(fine_tokens * fine_dim) × feature_dim`; the channel pseudo-inverse.
    fine: Matrix,
    fine_tokens: usize,
    fine_dim: usize,
}

impl VisualEncoders {
    pub fn new(channel: &ImageChannel, coarse_dim: usize, rng: &mut impl Rng) -> Self {
        let a = channel.matrix();
        let feature_dim = a.rows();
        let scale = 1.0 / (feature_dim as f64).sqrt();
        let coarse = Matrix::from_fn(coarse_dim, feature_dim, |_, _| {
            rng.sample::<f64, _>(StandardNormal) * scale
        });
        let dm = DMatrix::from_row_slice(a.rows(), a.cols(), a.as_slice());
        let pinv = dm
            .pseudo_inverse(1e-12)
            .expect("pseudo-inverse of a finite matrix");
        let fine = Matrix::from_fn(pinv.nrows(), pinv.ncols(), |r, c| pinv[(r, c)]);
        let fine_dim = 3;
        Self {
            coarse,
            fine_tokens: fine.rows() / fine_dim,
            fine,
            fine_dim,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.coarse.cols()
    }

    pub fn coarse_dim(&self) -> usize {
        self.coarse.rows()
    }

    pub fn fine_dim(&self) -> usize {
        self.fine_dim
    }

    pub fn fine_tokens(&self) -> usize {
        self.fine_tokens
    }

    /// `f_a`: one global summary token.
    pub fn coarse(&self, features: &[f64]) -> Result<Vector> {
        Ok(self
            .coarse
            .matvec(features)?
            .iter()
            .map(|v| v.tanh())
            .collect())
    }

    /// `f_b`: one token per joint (the recovered joint position).
    pub fn fine(&self, features: &[f64]) -> Result<Vec<Vector>> {
        let flat = self.fine.matvec(features)?;
        Ok(flat
            .chunks_exact(self.fine_dim)
            .map(|c| c.to_vec().into())
            .collect())
    }
}

/// Fixed encoders plus the two learned projections `W_a`, `W_b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualFusion {
    pub encoders: VisualEncoders,
    /// `proj_dim × coarse_dim`
    pub w_a: Matrix,
    /// `proj_dim × fine_dim`, shared by every fine token.
    pub w_b: Matrix,
}

impl DualFusion {
    pub fn new(encoders: VisualEncoders, proj_dim: usize, rng: &mut impl Rng) -> Self {
        let init = |rows: usize, cols: usize, rng: &mut dyn rand::RngCore| {
            let bound = 1.0 / (cols as f64).sqrt();
            Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
        };
        let w_a = init(proj_dim, encoders.coarse_dim(), rng);
        let w_b = init(proj_dim, encoders.fine_dim(), rng);
        Self { encoders, w_a, w_b }
    }

    pub fn proj_dim(&self) -> usize {
        self.w_a.rows()
    }

    /// Number of fused tokens (one coarse + one per joint).
    pub fn n_tokens(&self) -> usize {
        1 + self.encoders.fine_tokens()
    }

    /// Width of the flattened fused output.
    pub fn output_width(&self) -> usize {
        self.n_tokens() * self.proj_dim()
    }

    pub fn num_params(&self) -> usize {
        self.w_a.as_slice().len() + self.w_b.as_slice().len()
    }

    /// Projected tokens `[W_a v_a, W_b v_b^1, ..., W_b v_b^J]`.
    pub fn fuse(&self, features: &[f64]) -> Result<Vec<Vector>> {
        check_len("fuse_visual", self.encoders.feature_dim(), features.len())?;
        let mut tokens = vec![self.w_a.matvec(&self.encoders.coarse(features)?)?];
        for v in self.encoders.fine(features)? {
            tokens.push(self.w_b.matvec(&v)?);
        }
        Ok(tokens)
    }

    /// Tape version of [`DualFusion::fuse`], flattened. `W_a` then `W_b`
    /// live at `offset` in the flat parameter vector.
    pub fn fuse_tape(&self, tape: &mut Tape, features: &[f64], offset: usize) -> Result<Var> {
        check_len("fuse_visual", self.encoders.feature_dim(), features.len())?;
        let (d, da, db) = (
            self.proj_dim(),
            self.encoders.coarse_dim(),
            self.encoders.fine_dim(),
        );
        let wa = tape.param(offset, self.w_a.as_slice());
        let wb = tape.param(offset + d * da, self.w_b.as_slice());
        let va = tape.constant(self.encoders.coarse(features)?.into_inner());
        let mut parts = vec![tape.matvec(wa, d, da, va)?];
        for v in self.encoders.fine(features)? {
            let vb = tape.constant(v.into_inner());
            parts.push(tape.matvec(wb, d, db, vb)?);
        }
        Ok(tape.concat(&parts))
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.w_a.as_slice());
        out.extend_from_slice(self.w_b.as_slice());
    }

    pub fn restore(&mut self, flat: &[f64]) -> Result<()> {
        check_len("fusion_restore", self.num_params(), flat.len())?;
        let na = self.w_a.as_slice().len();
        self.w_a.as_mut_slice().copy_from_slice(&flat[..na]);
        self.w_b.as_mut_slice().copy_from_slice(&flat[na..]);
        Ok(())
    }
}
