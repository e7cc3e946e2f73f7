//! Desk-scale trimanual teleoperation rig.
//!
//! Two manipulator arms and a 7-DoF active-vision camera arm, driven through
//! relative-pose teleoperation and differential IK, stepped by a kinematic
//! simulator at 50 Hz, observed by six ray-cast cameras, recorded into
//! episode files and replayed by chunked-action policies.

pub mod camera;
pub mod episode;
pub mod kinematics;
pub mod operator;
pub mod policy;
pub mod pose;
pub mod rig;
pub mod sim;
pub mod teleop;
#[doc(hidden)]
pub mod testing;

pub use pose::Pose;
pub use rig::{ChainId, Qpos, Rig, QPOS_LEN};
