//! Rigid/similarity transforms and small rotation helpers.
//!
//! Frames: the world frame is the camera frame (x right, y down, z
//! forward). Model frames use x along the object's length, y down and z
//! lateral, so a yaw is a rotation about y.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `x ↦ s·R·x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    /// Row-major rotation.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub scale: f64,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros(), 1.0)
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>, scale: f64) -> Self {
        Self {
            rotation: to_rows(&rotation),
            translation: translation.into(),
            scale,
        }
    }

    pub fn from_yaw(yaw: f64, translation: [f64; 3], scale: f64) -> Self {
        Self::new(yaw_rotation(yaw), Vector3::from(translation), scale)
    }

    /// Validates the rotation (orthonormal, det +1) and the scale.
    pub fn validated(self) -> Result<Self> {
        let r = self.rotation_matrix();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::usage("rotation is not a proper orthonormal matrix"));
        }
        if !(self.scale > 0.0) {
            return Err(Error::usage("scale must be positive"));
        }
        Ok(self)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        from_rows(&self.rotation)
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.rotation_matrix() * Vector3::from(p) * self.scale + self.translation_vector();
        v.into()
    }

    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        (self.rotation_matrix() * Vector3::from(v)).into()
    }

    pub fn inverse_apply(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.rotation_matrix().transpose() * (Vector3::from(p) - self.translation_vector()) / self.scale;
        v.into()
    }

    /// Yaw of the heading `R·x̂` about the vertical axis.
    pub fn yaw(&self) -> f64 {
        let h = self.rotate([1.0, 0.0, 0.0]);
        (-h[2]).atan2(h[0])
    }

    /// Geodesic angle between the two rotations, in radians.
    pub fn rotation_angle_to(&self, other: &Self) -> f64 {
        rotation_angle(&(self.rotation_matrix().transpose() * other.rotation_matrix()))
    }

    pub fn translation_distance_to(&self, other: &Self) -> f64 {
        (self.translation_vector() - other.translation_vector()).norm()
    }
}

/// Rotation about the vertical (y) axis.
pub fn yaw_rotation(yaw: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Vector3::y_axis(), yaw).into_inner()
}

/// Rodrigues map from an axis-angle vector to a rotation matrix.
pub fn exp_so3(omega: [f64; 3]) -> Matrix3<f64> {
    let v = Vector3::from(omega);
    let angle = v.norm();
    if angle == 0.0 {
        return Matrix3::identity();
    }
    Rotation3::from_axis_angle(&Unit::new_normalize(v), angle).into_inner()
}

pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Wraps an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = a % two_pi;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    } else if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

pub fn to_rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    [
        [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
        [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
        [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
    ]
}

pub fn from_rows(r: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::new(
        r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
    )
}

pub fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn yaw_round_trip() {
        for yaw in [-3.0, -1.0, 0.0, 0.4, 2.9] {
            let t = SimilarityTransform::from_yaw(yaw, [1.0, 2.0, 3.0], 2.0);
            assert!((t.yaw() - yaw).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_apply_inverts_apply() {
        let t = SimilarityTransform::new(exp_so3([0.2, -0.4, 0.9]), Vector3::new(1.0, -2.0, 7.0), 4.5);
        let p = [0.1, -0.3, 0.25];
        let q = t.inverse_apply(t.apply(p));
        assert!(dist3(p, q) < 1e-12);
        assert!(t.validated().is_ok());
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-12);
        assert!((wrap_angle(-0.5) + 0.5).abs() < 1e-15);
    }
}
