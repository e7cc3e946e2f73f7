use nalgebra::{DMatrix, Unit, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::KinematicsError;
use crate::pose::Pose;

/// One revolute joint: a fixed transform from the previous link frame followed
/// by a rotation about `axis`.
#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub name: String,
    pub parent_offset: Pose,
    pub axis: Unit<Vector3<f64>>,
    pub limit_lo: f64,
    pub limit_hi: f64,
    pub center: f64,
}

impl Joint {
    pub fn new(
        name: impl Into<String>,
        parent_offset: Pose,
        axis: Vector3<f64>,
        limits: (f64, f64),
        center: Option<f64>,
    ) -> Result<Self, KinematicsError> {
        let name = name.into();
        let norm = axis.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-9 {
            return Err(KinematicsError::InvalidChain(format!(
                "joint {name}: axis norm {norm} is not 1"
            )));
        }
        let (lo, hi) = limits;
        if !(lo < hi) {
            return Err(KinematicsError::InvalidChain(format!(
                "joint {name}: limit_lo {lo} must be below limit_hi {hi}"
            )));
        }
        let center = center.unwrap_or(0.5 * (lo + hi));
        if !(lo <= center && center <= hi) {
            return Err(KinematicsError::InvalidChain(format!(
                "joint {name}: center {center} outside [{lo}, {hi}]"
            )));
        }
        Ok(Self {
            name,
            parent_offset,
            axis: Unit::new_unchecked(axis),
            limit_lo: lo,
            limit_hi: hi,
            center,
        })
    }

    #[inline]
    pub fn clamp(&self, q: f64) -> f64 {
        q.clamp(self.limit_lo, self.limit_hi)
    }

    #[inline]
    pub fn local_transform(&self, q: f64) -> Pose {
        self.parent_offset
            .compose(&Pose::from_axis_angle(&self.axis, q))
    }
}

/// Joint positions in radians, one per joint of the chain they belong to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointState(pub Vec<f64>);

impl JointState {
    pub fn zeros(dof: usize) -> Self {
        Self(vec![0.0; dof])
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for JointState {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl From<&[f64]> for JointState {
    fn from(v: &[f64]) -> Self {
        Self(v.to_vec())
    }
}

/// A serial chain of revolute joints mounted at `base_pose`, ending in a
/// tool (or camera) frame `tool_offset` past the last joint.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicChain {
    pub name: String,
    pub base_pose: Pose,
    pub joints: Vec<Joint>,
    pub tool_offset: Pose,
}

impl KinematicChain {
    pub fn new(
        name: impl Into<String>,
        base_pose: Pose,
        joints: Vec<Joint>,
        tool_offset: Pose,
    ) -> Result<Self, KinematicsError> {
        let name = name.into();
        if joints.is_empty() {
            return Err(KinematicsError::InvalidChain(format!(
                "chain {name} has no joints"
            )));
        }
        Ok(Self {
            name,
            base_pose,
            joints,
            tool_offset,
        })
    }

    #[inline]
    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn centers(&self) -> JointState {
        JointState(self.joints.iter().map(|j| j.center).collect())
    }

    pub fn check_dim(&self, q: &[f64]) -> Result<(), KinematicsError> {
        if q.len() != self.dof() {
            return Err(KinematicsError::DimensionMismatch {
                chain: self.name.clone(),
                expected: self.dof(),
                actual: q.len(),
            });
        }
        Ok(())
    }

    pub fn clamp_in_place(&self, q: &mut [f64]) {
        for (qi, j) in q.iter_mut().zip(&self.joints) {
            *qi = j.clamp(*qi);
        }
    }

    pub fn within_limits(&self, q: &[f64]) -> bool {
        q.len() == self.dof()
            && q
                .iter()
                .zip(&self.joints)
                .all(|(qi, j)| j.limit_lo <= *qi && *qi <= j.limit_hi)
    }

    /// World poses of every link frame (after each joint rotation), followed by
    /// the tool frame. The result has `dof + 1` entries.
    pub fn forward_kinematics(&self, q: &[f64]) -> Result<Vec<Pose>, KinematicsError> {
        self.check_dim(q)?;
        let mut frames = Vec::with_capacity(self.dof() + 1);
        let mut acc = self.base_pose;
        for (joint, &qi) in self.joints.iter().zip(q) {
            acc = acc.compose(&joint.local_transform(qi));
            frames.push(acc);
        }
        frames.push(acc.compose(&self.tool_offset));
        Ok(frames)
    }

    pub fn tool_pose(&self, q: &[f64]) -> Result<Pose, KinematicsError> {
        Ok(*self
            .forward_kinematics(q)?
            .last()
            .expect("forward kinematics yields at least the tool frame"))
    }

    /// Geometric Jacobian at the tool point, 6 x dof. Rows 0..3 are linear
    /// velocity, rows 3..6 angular velocity, both in the world frame.
    pub fn jacobian(&self, q: &[f64]) -> Result<DMatrix<f64>, KinematicsError> {
        let frames = self.forward_kinematics(q)?;
        Ok(self.jacobian_from_frames(&frames))
    }

    pub(crate) fn jacobian_from_frames(&self, frames: &[Pose]) -> DMatrix<f64> {
        let n = self.dof();
        let tool = frames[n].translation();
        let mut jac = DMatrix::zeros(6, n);
        for (i, joint) in self.joints.iter().enumerate() {
            // Rotating about the joint's own axis leaves both axis and origin fixed.
            let frame = &frames[i];
            let w = frame.transform_vector(joint.axis.as_ref());
            let v = w.cross(&(tool - frame.translation()));
            jac.fixed_view_mut::<3, 1>(0, i).copy_from(&v);
            jac.fixed_view_mut::<3, 1>(3, i).copy_from(&w);
        }
        jac
    }

    pub fn from_json(text: &str) -> Result<Self, KinematicsError> {
        let desc: ChainDescription = serde_json::from_str(text)
            .map_err(|e| KinematicsError::InvalidChain(e.to_string()))?;
        desc.try_into()
    }

    pub fn to_description(&self) -> ChainDescription {
        ChainDescription {
            name: self.name.clone(),
            base_pose: self.base_pose,
            joints: self
                .joints
                .iter()
                .map(|j| JointDescription {
                    name: j.name.clone(),
                    offset: j.parent_offset,
                    axis: [j.axis.x, j.axis.y, j.axis.z],
                    limits: [j.limit_lo, j.limit_hi],
                    center: Some(j.center),
                })
                .collect(),
            tool_offset: self.tool_offset,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_description()).expect("chain description serializes")
    }

    /// SHA-256 of the compact JSON description; identifies the geometry an
    /// episode was recorded with.
    pub fn checksum(&self) -> String {
        let compact = serde_json::to_vec(&self.to_description()).expect("chain description serializes");
        hex::encode(Sha256::digest(&compact))
    }
}

/// On-disk chain description. Lengths in meters, angles in radians,
/// quaternions `(w, x, y, z)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainDescription {
    pub name: String,
    pub base_pose: Pose,
    pub joints: Vec<JointDescription>,
    pub tool_offset: Pose,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointDescription {
    pub name: String,
    pub offset: Pose,
    pub axis: [f64; 3],
    pub limits: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<f64>,
}

impl TryFrom<ChainDescription> for KinematicChain {
    type Error = KinematicsError;

    fn try_from(desc: ChainDescription) -> Result<Self, Self::Error> {
        let joints = desc
            .joints
            .into_iter()
            .map(|j| {
                Joint::new(
                    j.name,
                    j.offset,
                    Vector3::from(j.axis),
                    (j.limits[0], j.limits[1]),
                    j.center,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        KinematicChain::new(desc.name, desc.base_pose, joints, desc.tool_offset)
    }
}
