use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result};

/// Serial chain of unit links rooted at the origin. Each joint carries an
/// axis-angle rotation applied to every link after it; the rest link points
/// along `+x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KinematicChain {
    n_joints: usize,
    link_length: f64,
}

impl KinematicChain {
    pub fn new(n_joints: usize) -> Self {
        assert!(n_joints >= 1);
        Self {
            n_joints,
            link_length: 1.0,
        }
    }

    pub fn n_joints(&self) -> usize {
        self.n_joints
    }

    /// Number of pose parameters (3 per joint).
    pub fn pose_dim(&self) -> usize {
        3 * self.n_joints
    }

    /// Total reach of the chain.
    pub fn reach(&self) -> f64 {
        self.link_length * (self.n_joints - 1) as f64
    }

    /// Joint positions, root first.
    pub fn forward(&self, pose: &[f64]) -> Result<Vec<[f64; 3]>> {
        check_len("forward_kinematics", self.pose_dim(), pose.len())?;
        let link = Vector3::new(self.link_length, 0.0, 0.0);
        let mut frame = Rotation3::identity();
        let mut pos = Vector3::zeros();
        let mut joints = Vec::with_capacity(self.n_joints);
        joints.push([0.0; 3]);
        for j in 0..self.n_joints - 1 {
            let w = Vector3::new(pose[3 * j], pose[3 * j + 1], pose[3 * j + 2]);
            frame *= Rotation3::new(w);
            pos += frame * link;
            joints.push([pos.x, pos.y, pos.z]);
        }
        Ok(joints)
    }

    /// Analytic Jacobian of [`KinematicChain::forward_flat`], row-major
    /// `(3 n_joints) × (3 n_joints)`.
    pub fn jacobian(&self, pose: &[f64]) -> Result<crate::math::Matrix> {
        check_len("jacobian", self.pose_dim(), pose.len())?;
        let n = self.n_joints;
        let link = Vector3::new(self.link_length, 0.0, 0.0);
        let rots: Vec<Matrix3<f64>> = (0..n)
            .map(|j| {
                let w = Vector3::new(pose[3 * j], pose[3 * j + 1], pose[3 * j + 2]);
                *Rotation3::new(w).matrix()
            })
            .collect();
        let dim = 3 * n;
        let mut jac = crate::math::Matrix::zeros(dim, dim);
        let data = jac.as_mut_slice();
        for j in 0..n - 1 {
            let prefix = rots[..j].iter().fold(Matrix3::identity(), |acc, r| acc * r);
            let drs =
                rotation_derivatives(&Vector3::new(pose[3 * j], pose[3 * j + 1], pose[3 * j + 2]));
            // tail(k) = sum over links l = j..k-1 of R_{j+1}..R_l * link
            let mut tail = Vector3::zeros();
            let mut chain = Matrix3::identity();
            for k in (j + 1)..n {
                if k > j + 1 {
                    chain *= rots[k - 1];
                }
                tail += chain * link;
                for (c, dr) in drs.iter().enumerate() {
                    let d = prefix * dr * tail;
                    for r in 0..3 {
                        data[(3 * k + r) * dim + 3 * j + c] = d[r];
                    }
                }
            }
        }
        Ok(jac)
    }

    /// Joint positions stacked into one vector of length `3 * n_joints`.
    pub fn forward_flat(&self, pose: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(pose)?.into_iter().flatten().collect())
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `∂R/∂w_i` for the rotation-vector map `R = exp([w]×)`.
fn rotation_derivatives(w: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let theta2 = w.norm_squared();
    let basis = [Vector3::x(), Vector3::y(), Vector3::z()];
    if theta2 < 1e-16 {
        return basis.map(|e| skew(&e));
    }
    let r = *Rotation3::new(*w).matrix();
    let i_minus_r = Matrix3::identity() - r;
    basis.map(|e| {
        // d/dw_i: ([w]× w_i + [w × (I - R) e_i]×) R / |w|²
        let lhs = skew(w) * w.dot(&e) + skew(&(w.cross(&(i_minus_r * e))));
        lhs * r / theta2
    })
}
