//! The three-arm rig: two 6-DoF manipulators with grippers and a 7-DoF camera
//! arm, plus the 21-value joint layout shared by observations and actions.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::kinematics::{KinematicChain, KinematicsError};
use crate::pose::Pose;

/// Length of the concatenated joint vector: left 6 + gripper, right 6 + gripper, AV 7.
pub const QPOS_LEN: usize = 21;

pub type Qpos = [f64; QPOS_LEN];

pub const LEFT_ARM: std::ops::Range<usize> = 0..6;
pub const LEFT_GRIPPER: usize = 6;
pub const RIGHT_ARM: std::ops::Range<usize> = 7..13;
pub const RIGHT_GRIPPER: usize = 13;
pub const AV_ARM: std::ops::Range<usize> = 14..21;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainId {
    Left,
    Right,
    Av,
}

impl ChainId {
    pub const ALL: [ChainId; 3] = [ChainId::Left, ChainId::Right, ChainId::Av];

    pub fn as_str(&self) -> &'static str {
        match self {
            ChainId::Left => "left",
            ChainId::Right => "right",
            ChainId::Av => "av",
        }
    }

    pub fn qpos_range(&self) -> std::ops::Range<usize> {
        match self {
            ChainId::Left => LEFT_ARM,
            ChainId::Right => RIGHT_ARM,
            ChainId::Av => AV_ARM,
        }
    }

    pub fn gripper_index(&self) -> Option<usize> {
        match self {
            ChainId::Left => Some(LEFT_GRIPPER),
            ChainId::Right => Some(RIGHT_GRIPPER),
            ChainId::Av => None,
        }
    }
}

impl fmt::Display for ChainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ChainId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "left" => Ok(ChainId::Left),
            "right" => Ok(ChainId::Right),
            "av" => Ok(ChainId::Av),
            other => Err(format!("unknown chain '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GripperConfig {
    /// Commanded angle for a released trigger.
    pub open_angle: f64,
    /// Commanded angle for a fully pressed trigger.
    pub closed_angle: f64,
    /// The gripper counts as closed while its angle is below this value.
    pub close_threshold: f64,
}

impl Default for GripperConfig {
    fn default() -> Self {
        Self {
            open_angle: 0.6,
            closed_angle: 0.0,
            close_threshold: 0.3,
        }
    }
}

impl GripperConfig {
    pub fn limits(&self) -> (f64, f64) {
        (
            self.open_angle.min(self.closed_angle),
            self.open_angle.max(self.closed_angle),
        )
    }

    pub fn is_closed(&self, angle: f64) -> bool {
        angle < self.close_threshold
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rig {
    pub left: KinematicChain,
    pub right: KinematicChain,
    pub av: KinematicChain,
    pub gripper: GripperConfig,
    pub start: Qpos,
}

const LEFT_JSON: &str = include_str!("../assets/chains/left.json");
const RIGHT_JSON: &str = include_str!("../assets/chains/right.json");
const AV_JSON: &str = include_str!("../assets/chains/av.json");

/// Ready pose: grippers open, manipulators folded over the table, camera
/// arm raised and looking down at the workspace.
const START_ARM: [f64; 6] = [0.0, -0.35, 0.55, 0.0, 1.1, 0.0];
const START_AV: [f64; 7] = [0.0, -0.3, -0.26, 0.0, 1.7, 0.0, 0.0];

impl Rig {
    /// The nominal geometry shipped with the crate.
    pub fn nominal() -> Self {
        Self::from_json(LEFT_JSON, RIGHT_JSON, AV_JSON).expect("bundled chain descriptions are valid")
    }

    pub fn from_json(left: &str, right: &str, av: &str) -> Result<Self, KinematicsError> {
        let left = KinematicChain::from_json(left)?;
        let right = KinematicChain::from_json(right)?;
        let av = KinematicChain::from_json(av)?;
        for (chain, dof) in [(&left, 6), (&right, 6), (&av, 7)] {
            if chain.dof() != dof {
                return Err(KinematicsError::InvalidChain(format!(
                    "chain {} has {} joints, expected {dof}",
                    chain.name,
                    chain.dof()
                )));
            }
        }
        let gripper = GripperConfig::default();
        let mut start = [0.0; QPOS_LEN];
        start[LEFT_ARM].copy_from_slice(&START_ARM);
        start[RIGHT_ARM].copy_from_slice(&START_ARM);
        start[AV_ARM].copy_from_slice(&START_AV);
        start[LEFT_GRIPPER] = gripper.open_angle;
        start[RIGHT_GRIPPER] = gripper.open_angle;
        let rig = Self {
            left,
            right,
            av,
            gripper,
            start,
        };
        rig.clamp_qpos(&mut start);
        Ok(Self { start, ..rig })
    }

    /// Loads `left.json`, `right.json` and `av.json` from a directory.
    pub fn load_dir(dir: &Path) -> Result<Self, KinematicsError> {
        let read = |name: &str| {
            std::fs::read_to_string(dir.join(name))
                .map_err(|e| KinematicsError::InvalidChain(format!("{}: {e}", dir.join(name).display())))
        };
        Self::from_json(&read("left.json")?, &read("right.json")?, &read("av.json")?)
    }

    pub fn chain(&self, id: ChainId) -> &KinematicChain {
        match id {
            ChainId::Left => &self.left,
            ChainId::Right => &self.right,
            ChainId::Av => &self.av,
        }
    }

    pub fn chains(&self) -> [&KinematicChain; 3] {
        [&self.left, &self.right, &self.av]
    }

    pub fn start_q(&self, id: ChainId) -> &[f64] {
        &self.start[id.qpos_range()]
    }

    /// Tool pose of a chain for a full qpos vector.
    pub fn tool_pose(&self, id: ChainId, qpos: &Qpos) -> Pose {
        self.chain(id)
            .tool_pose(&qpos[id.qpos_range()])
            .expect("qpos ranges match chain dimensions")
    }

    pub fn link_frames(&self, id: ChainId, qpos: &Qpos) -> Vec<Pose> {
        self.chain(id)
            .forward_kinematics(&qpos[id.qpos_range()])
            .expect("qpos ranges match chain dimensions")
    }

    /// Clamps every entry to its joint (or gripper) limits; returns how many
    /// entries were changed.
    pub fn clamp_qpos(&self, q: &mut Qpos) -> usize {
        let mut clamped = 0;
        for id in ChainId::ALL {
            let chain = self.chain(id);
            for (qi, j) in q[id.qpos_range()].iter_mut().zip(&chain.joints) {
                let c = j.clamp(*qi);
                if c != *qi {
                    clamped += 1;
                    *qi = c;
                }
            }
        }
        let (lo, hi) = self.gripper.limits();
        for idx in [LEFT_GRIPPER, RIGHT_GRIPPER] {
            let c = q[idx].clamp(lo, hi);
            if c != q[idx] {
                clamped += 1;
                q[idx] = c;
            }
        }
        clamped
    }

    /// `(lo, hi)` for every entry of the joint vector.
    pub fn qpos_limits(&self) -> [(f64, f64); QPOS_LEN] {
        let mut out = [self.gripper.limits(); QPOS_LEN];
        for id in ChainId::ALL {
            for (slot, j) in out[id.qpos_range()].iter_mut().zip(&self.chain(id).joints) {
                *slot = (j.limit_lo, j.limit_hi);
            }
        }
        out
    }

    pub fn qpos_within_limits(&self, q: &Qpos) -> bool {
        let mut c = *q;
        self.clamp_qpos(&mut c) == 0
    }

    pub fn checksums(&self) -> ChainChecksums {
        ChainChecksums {
            left: self.left.checksum(),
            right: self.right.checksum(),
            av: self.av.checksum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainChecksums {
    pub left: String,
    pub right: String,
    pub av: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nominal_rig_has_expected_dofs() {
        let rig = Rig::nominal();
        assert_eq!(rig.left.dof(), 6);
        assert_eq!(rig.right.dof(), 6);
        assert_eq!(rig.av.dof(), 7);
        assert!(rig.qpos_within_limits(&rig.start));
    }

    #[test]
    fn nominal_reach_is_viperx_scale() {
        let rig = Rig::nominal();
        let zero = [0.0; 6];
        let frames = rig.left.forward_kinematics(&zero).unwrap();
        let (shoulder, elbow, tool) = (frames[1], frames[2], frames[6]);
        let reach = (elbow.translation() - shoulder.translation()).norm()
            + (tool.translation() - elbow.translation()).norm();
        assert!((0.65..0.85).contains(&reach), "reach {reach}");
    }

    #[test]
    fn clamp_counts_changes() {
        let rig = Rig::nominal();
        let mut q = rig.start;
        q[LEFT_GRIPPER] = 5.0;
        q[AV_ARM.start] = -10.0;
        assert_eq!(rig.clamp_qpos(&mut q), 2);
        assert!(rig.qpos_within_limits(&q));
    }

    #[test]
    fn checksums_differ_between_chains() {
        let c = Rig::nominal().checksums();
        assert_ne!(c.left, c.right);
        assert_ne!(c.left, c.av);
    }
}
