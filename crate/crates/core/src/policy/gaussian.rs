use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::math::{Tape, Var, Vector};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal Gaussian over pose vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    mean: Vector,
    diag_var: Vector,
}

impl GaussianParams {
    pub fn new(mean: Vector, diag_var: Vector) -> Result<Self> {
        check_len("gaussian_params", mean.len(), diag_var.len())?;
        if !mean.is_finite() || !diag_var.is_finite() {
            return Err(Error::NonFinite("gaussian parameters".into()));
        }
        if diag_var.iter().any(|&v| v <= 0.0) {
            return Err(Error::Contract("variance must be strictly positive".into()));
        }
        Ok(Self { mean, diag_var })
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    pub fn diag_var(&self) -> &Vector {
        &self.diag_var
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `log N(p; μ, diag(v))`.
pub fn gaussian_logpdf(p: &[f64], g: &GaussianParams) -> Result<f64> {
    check_len("gaussian_logpdf", g.dim(), p.len())?;
    let mut acc = 0.0;
    for ((&x, &m), &v) in p.iter().zip(g.mean.iter()).zip(g.diag_var.iter()) {
        let d = x - m;
        acc += LN_2PI + v.ln() + d * d / v;
    }
    Ok(-0.5 * acc)
}

/// `μ + √v ⊙ z` with `z` standard normal.
pub fn sample_pose(g: &GaussianParams, rng: &mut impl Rng) -> Vector {
    g.mean
        .iter()
        .zip(g.diag_var.iter())
        .map(|(m, v)| m + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// `KL(g_theta ‖ g_ref)` in closed form.
pub fn kl_gaussian(g_theta: &GaussianParams, g_ref: &GaussianParams) -> Result<f64> {
    check_len("kl_gaussian", g_ref.dim(), g_theta.dim())?;
    let mut acc = 0.0;
    for d in 0..g_theta.dim() {
        let (mu, v) = (g_theta.mean[d], g_theta.diag_var[d]);
        let (m, u) = (g_ref.mean[d], g_ref.diag_var[d]);
        acc += v / u + (mu - m) * (mu - m) / u - 1.0 + (u / v).ln();
    }
    Ok(0.5 * acc)
}

/// `KL(p ‖ q)` for two categorical distributions given as log-probabilities.
pub fn kl_categorical(logp: &[f64], logq: &[f64]) -> Result<f64> {
    check_len("kl_categorical", logp.len(), logq.len())?;
    Ok(logp
        .iter()
        .zip(logq)
        .map(|(&a, &b)| {
            if a == f64::NEG_INFINITY {
                0.0
            } else {
                a.exp() * (a - b)
            }
        })
        .sum())
}

pub(crate) fn logpdf_tape(tape: &mut Tape, p: &[f64], mean: Var, var: Var) -> Result<Var> {
    check_len("gaussian_logpdf", tape.len_of(mean), p.len())?;
    let x = tape.constant(p.to_vec());
    let d = tape.sub(x, mean)?;
    let sq = tape.mul(d, d)?;
    let q = tape.div(sq, var)?;
    let lv = tape.ln(var);
    let terms = tape.add(lv, q)?;
    let s = tape.sum(terms);
    let half = tape.scale(s, -0.5);
    Ok(tape.add_scalar(half, -0.5 * LN_2PI * p.len() as f64))
}

pub(crate) fn kl_gaussian_tape(
    tape: &mut Tape,
    mean: Var,
    var: Var,
    reference: &GaussianParams,
) -> Result<Var> {
    check_len("kl_gaussian", reference.dim(), tape.len_of(mean))?;
    let m = tape.constant(reference.mean.to_vec());
    let u = tape.constant(reference.diag_var.to_vec());
    let ln_u: f64 = reference.diag_var.iter().map(|u| u.ln()).sum();
    let ratio = tape.div(var, u)?;
    let d = tape.sub(mean, m)?;
    let sq = tape.mul(d, d)?;
    let maha = tape.div(sq, u)?;
    let ln_v = tape.ln(var);
    let a = tape.add(ratio, maha)?;
    let b = tape.sub(a, ln_v)?;
    let s = tape.sum(b);
    let shifted = tape.add_scalar(s, ln_u - reference.dim() as f64);
    Ok(tape.scale(shifted, 0.5))
}

pub(crate) fn kl_categorical_tape(tape: &mut Tape, logp: Var, logq: &[f64]) -> Result<Var> {
    check_len("kl_categorical", tape.len_of(logp), logq.len())?;
    let q = tape.constant(logq.to_vec());
    let p = tape.exp(logp);
    let d = tape.sub(logp, q)?;
    let w = tape.mul(p, d)?;
    Ok(tape.sum(w))
}
