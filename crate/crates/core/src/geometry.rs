//! 9-DoF object placement and rigid camera transforms.
//!
//! A [`Pose9`] places the canonical object frame in the world:
//! `p_w = R(phi) * diag(s) * p_o + t`. Shape queries need the opposite
//! direction, so [`world_to_object`] applies the inverse map and
//! [`point_pose_jacobian`] differentiates it with respect to the internal
//! 9-vector `[t, phi, log s]`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix3x4, Matrix4, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix3x9 = SMatrix<f64, 3, 9>;

const TAYLOR_THRESHOLD: f64 = 1e-8;

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula for `exp(phi^)`.
pub fn so3_exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < TAYLOR_THRESHOLD {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Matrix3::identity() + a * k + b * k * k
}

/// Inverse of [`so3_exp`], returning the rotation vector with norm in `[0, pi]`.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let w = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    if theta < TAYLOR_THRESHOLD {
        return 0.5 * w;
    }
    if PI - theta < 1e-6 {
        // Near a half turn the antisymmetric part vanishes; recover the axis
        // from the symmetric part instead.
        let b = (r + Matrix3::identity()) * 0.5;
        let mut axis = Vector3::new(
            b[(0, 0)].max(0.0).sqrt(),
            b[(1, 1)].max(0.0).sqrt(),
            b[(2, 2)].max(0.0).sqrt(),
        );
        let i = axis.imax();
        for j in 0..3 {
            if j != i && b[(i, j)] < 0.0 {
                axis[j] = -axis[j];
            }
        }
        if w.dot(&axis) < 0.0 {
            axis = -axis;
        }
        return axis.normalize() * theta;
    }
    w * (theta / (2.0 * theta.sin()))
}

/// Left Jacobian of SO(3): `exp(phi + d) ~= exp(J_l(phi) d) * exp(phi)`.
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < TAYLOR_THRESHOLD {
        return Matrix3::identity() + 0.5 * k + k * k / 6.0;
    }
    let t2 = theta * theta;
    let a = (1.0 - theta.cos()) / t2;
    let b = (theta - theta.sin()) / (t2 * theta);
    Matrix3::identity() + a * k + b * k * k
}

/// Maps an axis-angle vector to the equivalent rotation with `|phi| <= pi`.
pub fn wrap_rotation(phi: &Vector3<f64>) -> Vector3<f64> {
    let theta = phi.norm();
    if theta <= PI {
        return *phi;
    }
    let wrapped = theta.rem_euclid(2.0 * PI);
    let (axis, angle) = if wrapped > PI {
        (-phi / theta, 2.0 * PI - wrapped)
    } else {
        (phi / theta, wrapped)
    };
    axis * angle
}

/// 9-DoF placement of the canonical object frame in the world.
///
/// Scale is stored as log-scale so the 9-vector form is unconstrained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose9 {
    pub t: Vector3<f64>,
    pub phi: Vector3<f64>,
    pub log_s: Vector3<f64>,
}

impl Default for Pose9 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose9 {
    pub fn identity() -> Self {
        Self {
            t: Vector3::zeros(),
            phi: Vector3::zeros(),
            log_s: Vector3::zeros(),
        }
    }

    /// Builds a pose from raw per-axis scale, which must be strictly positive.
    pub fn new(t: Vector3<f64>, phi: Vector3<f64>, s: Vector3<f64>) -> Result<Self> {
        if s.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid(format!("scale must be positive, got {s:?}")));
        }
        Ok(Self {
            t,
            phi,
            log_s: s.map(f64::ln),
        })
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_s.map(f64::exp)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        so3_exp(&self.phi)
    }

    /// Internal 9-vector `[t, phi, log s]`.
    pub fn to_vector(&self) -> [f64; 9] {
        [
            self.t.x, self.t.y, self.t.z, self.phi.x, self.phi.y, self.phi.z, self.log_s.x,
            self.log_s.y, self.log_s.z,
        ]
    }

    pub fn from_vector(xi: &[f64; 9]) -> Self {
        Self {
            t: Vector3::new(xi[0], xi[1], xi[2]),
            phi: Vector3::new(xi[3], xi[4], xi[5]),
            log_s: Vector3::new(xi[6], xi[7], xi[8]),
        }
    }

    /// `[R t; 0 1] * diag(s, 1)`.
    pub fn to_matrix(&self) -> Matrix4<f64> {
        let rs = self.rotation() * Matrix3::from_diagonal(&self.scale());
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rs);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.t);
        m
    }

    /// Decomposes `[R diag(s) | t]`; columns of the 3x3 block give the scales.
    pub fn from_matrix(m: &Matrix3x4<f64>) -> Result<Self> {
        let block: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let s = Vector3::new(
            block.column(0).norm(),
            block.column(1).norm(),
            block.column(2).norm(),
        );
        if s.iter().any(|&v| !(v > 1e-12)) {
            return Err(Error::invalid("pose matrix has a degenerate scale column"));
        }
        let r = block * Matrix3::from_diagonal(&s.map(|v| 1.0 / v));
        if (r.transpose() * r - Matrix3::identity()).abs().max() > 1e-6 || r.determinant() < 0.0 {
            return Err(Error::invalid(
                "pose matrix is not a rotation times a positive diagonal scale",
            ));
        }
        let t = m.fixed_view::<3, 1>(0, 3).into_owned();
        Pose9::new(t, so3_log(&r), s)
    }

    pub fn upper_3x4(&self) -> Matrix3x4<f64> {
        self.to_matrix().fixed_view::<3, 4>(0, 0).into_owned()
    }
}

/// Matrix form of the internal 9-vector.
pub fn exp_pose(xi: &[f64; 9]) -> Matrix4<f64> {
    Pose9::from_vector(xi).to_matrix()
}

/// Object-to-world map: homogeneous product of `to_matrix(pose)` with `p`.
pub fn transform_point(pose: &Pose9, p: &Vector3<f64>) -> Vector3<f64> {
    pose.rotation() * p.component_mul(&pose.scale()) + pose.t
}

/// World-to-object map `diag(1/s) R^T (p_w - t)`.
pub fn world_to_object(pose: &Pose9, p_w: &Vector3<f64>) -> Vector3<f64> {
    (pose.rotation().transpose() * (p_w - pose.t)).component_div(&pose.scale())
}

/// Derivative of [`world_to_object`] with respect to `[t, phi, log s]`.
pub fn point_pose_jacobian(pose: &Pose9, p_w: &Vector3<f64>) -> Matrix3x9 {
    let rt = pose.rotation().transpose();
    let inv_s = Matrix3::from_diagonal(&pose.scale().map(|v| 1.0 / v));
    let v = p_w - pose.t;
    let p_o = inv_s * rt * v;

    let mut jac = Matrix3x9::zeros();
    jac.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-inv_s * rt));
    jac.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(inv_s * rt * skew(&v) * so3_left_jacobian(&pose.phi)));
    for i in 0..3 {
        jac[(i, 6 + i)] = -p_o[i];
    }
    jac
}

/// Mean placement plus a diagonal covariance over `[t, phi, log s]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseGaussian {
    pub mean: Pose9,
    pub var: [f64; 9],
}

impl PoseGaussian {
    pub fn new(mean: Pose9, var: [f64; 9]) -> Result<Self> {
        if var.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::invalid("pose variances must be nonnegative"));
        }
        Ok(Self { mean, var })
    }

    pub fn deterministic(mean: Pose9) -> Self {
        Self { mean, var: [0.0; 9] }
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rigid {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Rigid {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rigid {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if err > 1e-6 || rotation.determinant() < 0.0 {
            return Err(Error::invalid(format!(
                "rigid rotation block is not orthonormal (error {err:.3e})"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn compose(&self, other: &Rigid) -> Rigid {
        Rigid {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_3x4(m: &Matrix3x4<f64>) -> Result<Self> {
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    pub fn upper_3x4(&self) -> Matrix3x4<f64> {
        self.to_matrix().fixed_view::<3, 4>(0, 0).into_owned()
    }
}

/// Parses 12 whitespace-separated decimals as a row-major 3x4 matrix.
pub fn parse_matrix_3x4(text: &str) -> Result<Matrix3x4<f64>> {
    let values = text
        .split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|e| Error::format("pose", format!("bad number {tok:?}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if values.len() != 12 {
        return Err(Error::format(
            "pose",
            format!("expected 12 numbers, found {}", values.len()),
        ));
    }
    Ok(Matrix3x4::from_row_slice(&values))
}

/// Writes a 3x4 matrix as three lines of four shortest-roundtrip decimals.
pub fn format_matrix_3x4(m: &Matrix3x4<f64>) -> String {
    let mut out = String::new();
    for r in 0..3 {
        let row: Vec<String> = (0..4).map(|c| format!("{}", m[(r, c)])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}
