//! Operator-device to robot-target mapping.
//!
//! A session is anchored once: each device's pose at that moment is paired
//! with the current tool pose of the chain it drives. Afterwards every device
//! pose is turned into a target by applying its motion relative to the anchor,
//! conjugated by a fixed frame adapter (operator axes to robot axes), on top of
//! the anchored robot pose.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::kinematics::{
    ik_dls, ik_regularized, DlsConfig, IkReport, JointState, RegularizedConfig,
};
use crate::pose::Pose;
use crate::rig::{ChainId, Qpos, Rig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceId {
    Head,
    LeftHand,
    RightHand,
}

impl DeviceId {
    pub const ALL: [DeviceId; 3] = [DeviceId::Head, DeviceId::LeftHand, DeviceId::RightHand];

    /// The chain whose tool frame this device drives.
    pub fn chain(&self) -> ChainId {
        match self {
            DeviceId::Head => ChainId::Av,
            DeviceId::LeftHand => ChainId::Left,
            DeviceId::RightHand => ChainId::Right,
        }
    }

    pub fn index(&self) -> usize {
        *self as usize
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DeviceId::Head => "head",
            DeviceId::LeftHand => "left_hand",
            DeviceId::RightHand => "right_hand",
        }
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DeviceId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DeviceId::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| format!("unknown device '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DevicePose {
    pub device: DeviceId,
    /// Pose in the operator (VR, y-up) frame.
    pub pose: Pose,
    /// Trigger in `[0, 1]`; ignored for the head.
    pub trigger: f64,
    pub timestamp_us: u64,
}

/// One sample of all three devices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceFrame {
    pub devices: [DevicePose; 3],
}

impl DeviceFrame {
    pub fn new(poses: [Pose; 3], triggers: [f64; 2], timestamp_us: u64) -> Self {
        let mk = |device: DeviceId, pose: Pose, trigger: f64| DevicePose {
            device,
            pose,
            trigger,
            timestamp_us,
        };
        Self {
            devices: [
                mk(DeviceId::Head, poses[0], 0.0),
                mk(DeviceId::LeftHand, poses[1], triggers[0]),
                mk(DeviceId::RightHand, poses[2], triggers[1]),
            ],
        }
    }

    pub fn get(&self, device: DeviceId) -> &DevicePose {
        &self.devices[device.index()]
    }

    pub fn timestamp_us(&self) -> u64 {
        self.devices.iter().map(|d| d.timestamp_us).max().unwrap_or(0)
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TeleopError {
    #[error("cannot anchor: no pose for device {0}")]
    MissingDevice(DeviceId),
    #[error("cannot anchor: duplicate pose for device {0}")]
    DuplicateDevice(DeviceId),
    #[error("frame adapter is not a proper rotation")]
    ImproperAdapter,
}

/// Default operator-to-robot rotation: VR frames are y-up with `-z` forward,
/// the robot world is z-up with `+y` forward. A +90° turn about x maps
/// operator `y` to robot `z` and operator `-z` to robot `+y`.
pub fn default_frame_adapter() -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::x_axis(), FRAC_PI_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceAnchor {
    pub device_init: Pose,
    pub robot_init: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeleopAnchor {
    pub devices: [DeviceAnchor; 3],
    pub frame_adapter: Pose,
}

impl TeleopAnchor {
    pub fn get(&self, device: DeviceId) -> &DeviceAnchor {
        &self.devices[device.index()]
    }

    fn adapt(&self, relative: &Pose) -> Pose {
        self.frame_adapter
            .compose(relative)
            .compose(&self.frame_adapter.inverse())
    }

    fn unadapt(&self, relative: &Pose) -> Pose {
        self.frame_adapter
            .inverse()
            .compose(relative)
            .compose(&self.frame_adapter)
    }

    /// `robot_init ∘ adapt(device_init⁻¹ ∘ pose)`.
    pub fn map_pose(&self, device: DeviceId, pose: &Pose) -> Pose {
        let a = self.get(device);
        let relative = a.device_init.inverse().compose(pose);
        a.robot_init.compose(&self.adapt(&relative))
    }

    /// Device pose that [`Self::map_pose`] sends to `target`.
    pub fn device_pose_for(&self, device: DeviceId, target: &Pose) -> Pose {
        let a = self.get(device);
        let adapted = a.robot_init.inverse().compose(target);
        a.device_init.compose(&self.unadapt(&adapted))
    }
}

/// Anchors a session from one pose per device and the current rig joints.
pub fn anchor_session(
    device_poses: &[DevicePose],
    rig: &Rig,
    qpos: &Qpos,
    frame_adapter: UnitQuaternion<f64>,
) -> Result<TeleopAnchor, TeleopError> {
    let det = frame_adapter.to_rotation_matrix().matrix().determinant();
    if (det - 1.0).abs() > 1e-9 {
        return Err(TeleopError::ImproperAdapter);
    }
    let mut slots: [Option<DeviceAnchor>; 3] = [None; 3];
    for dp in device_poses {
        let slot = &mut slots[dp.device.index()];
        if slot.is_some() {
            return Err(TeleopError::DuplicateDevice(dp.device));
        }
        *slot = Some(DeviceAnchor {
            device_init: dp.pose,
            robot_init: rig.tool_pose(dp.device.chain(), qpos),
        });
    }
    let mut devices = [DeviceAnchor {
        device_init: Pose::identity(),
        robot_init: Pose::identity(),
    }; 3];
    for d in DeviceId::ALL {
        devices[d.index()] = slots[d.index()].ok_or(TeleopError::MissingDevice(d))?;
    }
    Ok(TeleopAnchor {
        devices,
        frame_adapter: Pose::from_rotation(frame_adapter),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GripperCommand {
    pub angle: f64,
    /// The trigger was outside `[0, 1]` and got clamped.
    pub clamped: bool,
}

/// Affine trigger map: 0 gives `open_angle`, 1 gives `closed_angle`.
pub fn trigger_to_gripper(trigger: f64, open_angle: f64, closed_angle: f64) -> GripperCommand {
    let t = if trigger.is_nan() { 0.0 } else { trigger.clamp(0.0, 1.0) };
    GripperCommand {
        angle: open_angle + (closed_angle - open_angle) * t,
        clamped: t != trigger,
    }
}

/// Exponential smoothing of a pose stream: `α · new + (1 − α) · previous`,
/// with slerp for the rotation.
#[derive(Debug, Clone, Default)]
pub struct PoseFilter {
    alpha: f64,
    state: Option<Pose>,
}

impl PoseFilter {
    pub fn new(alpha: f64) -> Self {
        Self { alpha, state: None }
    }

    pub fn apply(&mut self, pose: Pose) -> Pose {
        let out = match self.state {
            Some(prev) => prev.interpolate(&pose, self.alpha),
            None => pose,
        };
        self.state = Some(out);
        out
    }

    pub fn reset(&mut self) {
        self.state = None;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeleopConfig {
    /// Weight on the newest target; 1 disables smoothing.
    pub filter_alpha: f64,
    pub filter_enabled: bool,
    pub dls: DlsConfig,
    pub regularized: RegularizedConfig,
}

impl Default for TeleopConfig {
    fn default() -> Self {
        Self {
            filter_alpha: 0.8,
            filter_enabled: true,
            dls: DlsConfig::default(),
            regularized: RegularizedConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TeleopTelemetry {
    /// IK reports in device order (head, left hand, right hand).
    pub ik: Vec<IkReport>,
    pub trigger_clamped: bool,
}

/// The full device-to-joint pipeline for one session: anchor, per-device
/// target filters, IK warm-started from the previous solution.
#[derive(Debug, Clone)]
pub struct TeleopSession {
    config: TeleopConfig,
    adapter: UnitQuaternion<f64>,
    anchor: Option<TeleopAnchor>,
    filters: [PoseFilter; 3],
    last_targets: Qpos,
}

impl TeleopSession {
    pub fn new(config: TeleopConfig, rig: &Rig) -> Self {
        let alpha = if config.filter_enabled { config.filter_alpha } else { 1.0 };
        Self {
            config,
            adapter: default_frame_adapter(),
            anchor: None,
            filters: std::array::from_fn(|_| PoseFilter::new(alpha)),
            last_targets: rig.start,
        }
    }

    pub fn anchor(&self) -> Option<&TeleopAnchor> {
        self.anchor.as_ref()
    }

    pub fn frame_adapter(&self) -> UnitQuaternion<f64> {
        self.adapter
    }

    /// Anchors (or re-anchors, for clutching) against the current rig joints.
    /// The IK warm start is reset to `qpos` so the arms hold where they are.
    pub fn anchor_at(
        &mut self,
        frame: &DeviceFrame,
        rig: &Rig,
        qpos: &Qpos,
    ) -> Result<&TeleopAnchor, TeleopError> {
        let anchor = anchor_session(&frame.devices, rig, qpos, self.adapter)?;
        self.anchor = Some(anchor);
        for f in &mut self.filters {
            f.reset();
        }
        self.last_targets = *qpos;
        Ok(self.anchor.as_ref().expect("just anchored"))
    }

    pub fn last_targets(&self) -> &Qpos {
        &self.last_targets
    }

    /// Holds every joint at `qpos` (used while parked).
    pub fn hold(&mut self, qpos: &Qpos) {
        self.last_targets = *qpos;
        for f in &mut self.filters {
            f.reset();
        }
    }

    /// Maps one device sample to joint targets. Before anchoring the previous
    /// targets are returned unchanged.
    pub fn targets(&mut self, frame: &DeviceFrame, rig: &Rig) -> (Qpos, TeleopTelemetry) {
        let mut telemetry = TeleopTelemetry::default();
        let Some(anchor) = self.anchor.clone() else {
            return (self.last_targets, telemetry);
        };
        let mut q = self.last_targets;
        for device in DeviceId::ALL {
            let chain_id = device.chain();
            let chain = rig.chain(chain_id);
            let raw = anchor.map_pose(device, &frame.get(device).pose);
            let target = self.filters[device.index()].apply(raw);
            let range = chain_id.qpos_range();
            let q0 = JointState(q[range.clone()].to_vec());
            let sol = match chain_id {
                ChainId::Av => ik_dls(chain, &q0, &target, &self.config.dls),
                _ => ik_regularized(chain, &q0, &target, &self.config.regularized),
            }
            .expect("solver parameters validated by configuration and dimensions fixed by rig");
            q[range].copy_from_slice(sol.q.as_slice());
            telemetry.ik.push(sol.report);
            if let Some(g) = chain_id.gripper_index() {
                let cmd = trigger_to_gripper(
                    frame.get(device).trigger,
                    rig.gripper.open_angle,
                    rig.gripper.closed_angle,
                );
                q[g] = cmd.angle;
                telemetry.trigger_clamped |= cmd.clamped;
            }
        }
        self.last_targets = q;
        (q, telemetry)
    }
}
