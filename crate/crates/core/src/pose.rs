//! Rigid transforms.
//!
//! [`Pose`] is a unit quaternion plus a translation. Every constructor and
//! operation renormalizes the quaternion and canonicalizes it to `w >= 0`, so
//! two poses describing the same transform serialize identically.

use nalgebra::{Matrix3, Quaternion, Rotation3, Unit, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::ops::Mul;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    translation: Vector3<f64>,
    rotation: UnitQuaternion<f64>,
}

fn canonical(q: Quaternion<f64>) -> UnitQuaternion<f64> {
    let q = if q.w < 0.0 { -q } else { q };
    UnitQuaternion::new_normalize(q)
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            translation: Vector3::zeros(),
            rotation: UnitQuaternion::identity(),
        }
    }

    pub fn new(translation: Vector3<f64>, rotation: UnitQuaternion<f64>) -> Self {
        Self {
            translation,
            rotation: canonical(rotation.into_inner()),
        }
    }

    /// Builds a pose from raw `(w, x, y, z)` quaternion components, normalizing them.
    pub fn from_parts(translation: [f64; 3], wxyz: [f64; 4]) -> Self {
        let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        Self {
            translation: Vector3::from(translation),
            rotation: canonical(q),
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            translation,
            rotation: UnitQuaternion::identity(),
        }
    }

    pub fn from_rotation(rotation: UnitQuaternion<f64>) -> Self {
        Self::new(Vector3::zeros(), rotation)
    }

    pub fn from_axis_angle(axis: &Unit<Vector3<f64>>, angle: f64) -> Self {
        Self::from_rotation(UnitQuaternion::from_axis_angle(axis, angle))
    }

    /// Rotation from a 3x3 matrix whose columns are the frame axes.
    pub fn from_rotation_matrix(translation: Vector3<f64>, m: &Matrix3<f64>) -> Self {
        let rot = Rotation3::from_matrix_unchecked(*m);
        Self::new(translation, UnitQuaternion::from_rotation_matrix(&rot))
    }

    /// Exponential map: translation plus rotation vector.
    pub fn from_translation_rotvec(translation: Vector3<f64>, rotvec: Vector3<f64>) -> Self {
        Self::new(translation, UnitQuaternion::from_scaled_axis(rotvec))
    }

    /// Camera-style look-at: local `+z` points at `target`, local `+y` points
    /// as close to world `-z` as possible (image rows run downward).
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let up = Vector3::z();
        let mut x = z.cross(&up);
        if x.norm() < 1e-9 {
            x = Vector3::x();
        }
        let x = x.normalize();
        let y = z.cross(&x);
        Self::from_rotation_matrix(eye, &Matrix3::from_columns(&[x, y, z]))
    }

    #[inline]
    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    #[inline]
    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// `(w, x, y, z)`.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            translation: self.translation + self.rotation * other.translation,
            rotation: canonical((self.rotation * other.rotation).into_inner()),
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose {
            translation: -(inv * self.translation),
            rotation: canonical(inv.into_inner()),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn with_translation(&self, translation: Vector3<f64>) -> Pose {
        Pose {
            translation,
            rotation: self.rotation,
        }
    }

    pub fn translated(&self, delta: Vector3<f64>) -> Pose {
        self.with_translation(self.translation + delta)
    }

    /// Interpolates translation linearly and rotation by slerp; `s = 0` gives `self`.
    pub fn interpolate(&self, other: &Pose, s: f64) -> Pose {
        let t = self.translation + (other.translation - self.translation) * s;
        let r = self
            .rotation
            .try_slerp(&other.rotation, s, 1e-12)
            .unwrap_or(other.rotation);
        Pose::new(t, r)
    }

    pub fn quaternion_norm(&self) -> f64 {
        self.rotation.quaternion().norm()
    }

    pub fn angle_to(&self, other: &Pose) -> f64 {
        rotation_vector(&(other.rotation * self.rotation.inverse())).norm()
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl<'a> Mul<&'a Pose> for &'a Pose {
    type Output = Pose;
    fn mul(self, rhs: &'a Pose) -> Pose {
        self.compose(rhs)
    }
}

/// Logarithm of a unit quaternion as a rotation vector with angle in `[0, π]`.
pub fn rotation_vector(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let q = q.quaternion();
    let (w, v) = if q.w < 0.0 {
        (-q.w, -q.imag())
    } else {
        (q.w, q.imag())
    };
    let s = v.norm();
    if s < 1e-12 {
        // angle ≈ 2 s / w; first-order series keeps it smooth at zero.
        return v * (2.0 / w);
    }
    let angle = 2.0 * s.atan2(w);
    v * (angle / s)
}

/// Pose error driving the IK solvers: translation delta followed by the
/// rotation vector of `target ∘ current⁻¹`, both in the world frame.
pub fn pose_error(current: &Pose, target: &Pose) -> Vector6<f64> {
    let dt = target.translation - current.translation;
    let dr = rotation_vector(&(target.rotation * current.rotation.inverse()));
    Vector6::new(dt.x, dt.y, dt.z, dr.x, dr.y, dr.z)
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    translation: [f64; 3],
    rotation: [f64; 4],
}

impl Serialize for Pose {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PoseRepr {
            translation: [self.translation.x, self.translation.y, self.translation.z],
            rotation: self.quaternion_wxyz(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = PoseRepr::deserialize(d)?;
        let n = repr.rotation.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !(n.is_finite() && n > 1e-6) {
            return Err(serde::de::Error::custom("rotation quaternion must be non-zero"));
        }
        Ok(Pose::from_parts(repr.translation, repr.rotation))
    }
}
