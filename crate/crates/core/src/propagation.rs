//! First-order propagation of latent and pose Gaussians to the SDF value at
//! a world point, and the matching adjoint over the optimizer parameters.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::decoder::{LatentGaussian, SdfDecoder};
use crate::error::Result;
use crate::geometry::{point_pose_jacobian, world_to_object, Pose9, PoseGaussian};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdfGaussian {
    pub mean: f64,
    pub var: f64,
}

/// SDF Gaussian together with the Jacobians it was linearized with.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedSdf {
    pub gaussian: SdfGaussian,
    pub j_z: Vec<f64>,
    pub j_xi: [f64; 9],
}

pub fn sdf_distribution<D: SdfDecoder + ?Sized>(
    decoder: &D,
    z: &LatentGaussian,
    pose: &PoseGaussian,
    p_w: &Vector3<f64>,
) -> Result<SdfGaussian> {
    Ok(linearize(decoder, z, pose, p_w)?.gaussian)
}

pub fn linearize<D: SdfDecoder + ?Sized>(
    decoder: &D,
    z: &LatentGaussian,
    pose: &PoseGaussian,
    p_w: &Vector3<f64>,
) -> Result<LinearizedSdf> {
    linearize_at(decoder, z, pose, p_w, None)
}

/// Means at which the variance Jacobians are held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianPoint {
    pub z_mean: Vec<f64>,
    pub pose: Pose9,
}

fn jacobians<D: SdfDecoder + ?Sized>(
    decoder: &D,
    z_mean: &[f64],
    pose: &Pose9,
    p_w: &Vector3<f64>,
) -> Result<(f64, Vec<f64>, [f64; 9])> {
    let p_o = world_to_object(pose, p_w);
    let eval = decoder.decode_jacobians(z_mean, &p_o)?;
    let j_xi_row = eval.d_p.transpose() * point_pose_jacobian(pose, p_w);
    let mut j_xi = [0.0; 9];
    j_xi.copy_from_slice(j_xi_row.as_slice());
    Ok((eval.value, eval.d_z, j_xi))
}

/// Like [`linearize`], but when `at` is given the variance uses Jacobians
/// evaluated there instead of at the current means. The mean is always
/// exact. Differentiating this surrogate at `at` gives the stop-gradient
/// gradient exactly, which is what finite-difference checks compare to.
pub fn linearize_at<D: SdfDecoder + ?Sized>(
    decoder: &D,
    z: &LatentGaussian,
    pose: &PoseGaussian,
    p_w: &Vector3<f64>,
    at: Option<&JacobianPoint>,
) -> Result<LinearizedSdf> {
    let (value, j_z, j_xi) = jacobians(decoder, &z.mean, &pose.mean, p_w)?;
    let (vj_z, vj_xi) = match at {
        None => (j_z.clone(), j_xi),
        Some(at) => {
            let (_, a, b) = jacobians(decoder, &at.z_mean, &at.pose, p_w)?;
            (a, b)
        }
    };
    let var_z: f64 = vj_z.iter().zip(&z.var).map(|(j, v)| j * j * v).sum();
    let var_xi: f64 = vj_xi.iter().zip(&pose.var).map(|(j, v)| j * j * v).sum();
    Ok(LinearizedSdf {
        gaussian: SdfGaussian {
            mean: value,
            var: var_z + var_xi,
        },
        j_z,
        j_xi,
    })
}

/// Gradient over `[μ_z, log Σ_z, ξ, log Σ_ξ]`.
///
/// The Jacobians inside a [`LinearizedSdf`] are treated as constants, so an
/// upstream gradient `(g_mean, g_var)` reaches the means through the SDF
/// value only and reaches the log-variances linearly.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub mu_z: Vec<f64>,
    pub log_var_z: Vec<f64>,
    pub xi: [f64; 9],
    pub log_var_xi: [f64; 9],
}

impl ParamGradient {
    pub fn zeros(latent_dim: usize) -> Self {
        Self {
            mu_z: vec![0.0; latent_dim],
            log_var_z: vec![0.0; latent_dim],
            xi: [0.0; 9],
            log_var_xi: [0.0; 9],
        }
    }

    pub fn accumulate(
        &mut self,
        lin: &LinearizedSdf,
        z: &LatentGaussian,
        pose: &PoseGaussian,
        g_mean: f64,
        g_var: f64,
    ) {
        for i in 0..self.mu_z.len() {
            let j = lin.j_z[i];
            self.mu_z[i] += g_mean * j;
            self.log_var_z[i] += g_var * j * j * z.var[i];
        }
        for k in 0..9 {
            let j = lin.j_xi[k];
            self.xi[k] += g_mean * j;
            self.log_var_xi[k] += g_var * j * j * pose.var[k];
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.mu_z.iter_mut().for_each(|v| *v *= factor);
        self.log_var_z.iter_mut().for_each(|v| *v *= factor);
        self.xi.iter_mut().for_each(|v| *v *= factor);
        self.log_var_xi.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn add(&mut self, other: &ParamGradient) {
        for (a, b) in self.mu_z.iter_mut().zip(&other.mu_z) {
            *a += b;
        }
        for (a, b) in self.log_var_z.iter_mut().zip(&other.log_var_z) {
            *a += b;
        }
        for k in 0..9 {
            self.xi[k] += other.xi[k];
            self.log_var_xi[k] += other.log_var_xi[k];
        }
    }

    /// Flatten in parameter-vector order.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.mu_z.len() + 18);
        out.extend_from_slice(&self.mu_z);
        out.extend_from_slice(&self.log_var_z);
        out.extend_from_slice(&self.xi);
        out.extend_from_slice(&self.log_var_xi);
        out
    }

    pub fn from_vec(v: &[f64], latent_dim: usize) -> Self {
        let mut g = Self::zeros(latent_dim);
        g.mu_z.copy_from_slice(&v[..latent_dim]);
        g.log_var_z.copy_from_slice(&v[latent_dim..2 * latent_dim]);
        g.xi.copy_from_slice(&v[2 * latent_dim..2 * latent_dim + 9]);
        g.log_var_xi.copy_from_slice(&v[2 * latent_dim + 9..2 * latent_dim + 18]);
        g
    }
}

/// Sum gradients in a fixed pairwise order, independent of how they were
/// produced.
pub fn sum_gradients(parts: &[ParamGradient], latent_dim: usize) -> ParamGradient {
    match parts.len() {
        0 => ParamGradient::zeros(latent_dim),
        1 => parts[0].clone(),
        n => {
            let (a, b) = parts.split_at(n / 2);
            let mut left = sum_gradients(a, latent_dim);
            left.add(&sum_gradients(b, latent_dim));
            left
        }
    }
}
