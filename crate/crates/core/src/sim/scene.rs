use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::pose::Pose;
use crate::rig::ChainId;

/// Primitive shapes. Cylinders and capsules run along their local z axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    Sphere { r: f64 },
    Box { hx: f64, hy: f64, hz: f64 },
    Cylinder { r: f64, half_len: f64 },
    Capsule { r: f64, half_len: f64 },
}

impl Shape {
    pub fn bounding_radius(&self) -> f64 {
        match *self {
            Shape::Sphere { r } => r,
            Shape::Box { hx, hy, hz } => (hx * hx + hy * hy + hz * hz).sqrt(),
            Shape::Cylinder { r, half_len } => (r * r + half_len * half_len).sqrt(),
            Shape::Capsule { r, half_len } => r + half_len,
        }
    }

    /// Local point at the `+z` end of elongated shapes; the center otherwise.
    pub fn tip_local(&self) -> Vector3<f64> {
        match *self {
            Shape::Cylinder { half_len, .. } => Vector3::new(0.0, 0.0, half_len),
            Shape::Capsule { r, half_len } => Vector3::new(0.0, 0.0, half_len + r),
            _ => Vector3::zeros(),
        }
    }

    pub fn radius(&self) -> f64 {
        match *self {
            Shape::Sphere { r } | Shape::Cylinder { r, .. } | Shape::Capsule { r, .. } => r,
            Shape::Box { hx, hy, hz } => hx.min(hy).min(hz),
        }
    }
}

/// Insertion target on an object, all in the object's local frame.
/// `axis` points into the object (the insertion direction).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Socket {
    pub axis: [f64; 3],
    pub entry: [f64; 3],
    pub depth: f64,
    pub radius: f64,
}

impl Socket {
    pub fn world_axis(&self, pose: &Pose) -> Vector3<f64> {
        pose.transform_vector(&Vector3::from(self.axis))
    }

    pub fn world_entry(&self, pose: &Pose) -> Vector3<f64> {
        pose.transform_point(&Vector3::from(self.entry))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Attachment {
    pub chain: ChainId,
    /// `tool⁻¹ ∘ object` captured when the gripper closed.
    pub offset: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub name: String,
    pub shape: Shape,
    pub pose: Pose,
    pub graspable: bool,
    /// Local points a tool must come within grasp radius of.
    pub grasp_sites: Vec<[f64; 3]>,
    /// The holder the object's pose is slaved to.
    pub attached_to: Option<Attachment>,
    /// Other grippers closed on the object; they take over on release.
    pub co_holders: Vec<Attachment>,
    pub socket: Option<Socket>,
}

impl SceneObject {
    pub fn new(name: &str, shape: Shape, pose: Pose) -> Self {
        Self {
            name: name.to_string(),
            shape,
            pose,
            graspable: false,
            grasp_sites: Vec::new(),
            attached_to: None,
            co_holders: Vec::new(),
            socket: None,
        }
    }

    pub fn graspable_at(mut self, sites: &[[f64; 3]]) -> Self {
        self.graspable = true;
        self.grasp_sites = sites.to_vec();
        self
    }

    pub fn with_socket(mut self, socket: Socket) -> Self {
        self.socket = Some(socket);
        self
    }

    pub fn is_held_by(&self, chain: ChainId) -> bool {
        self.attached_to.is_some_and(|a| a.chain == chain)
            || self.co_holders.iter().any(|a| a.chain == chain)
    }

    pub fn attachment_for(&self, chain: ChainId) -> Option<&Attachment> {
        self.attached_to
            .iter()
            .chain(self.co_holders.iter())
            .find(|a| a.chain == chain)
    }

    pub fn tip(&self) -> Vector3<f64> {
        self.pose.transform_point(&self.shape.tip_local())
    }

    pub fn axis(&self) -> Vector3<f64> {
        self.pose.transform_vector(&Vector3::z())
    }

    /// Closest grasp site to `point`, with its distance.
    pub fn nearest_site(&self, point: &Vector3<f64>) -> Option<(usize, f64)> {
        self.grasp_sites
            .iter()
            .enumerate()
            .map(|(i, s)| (i, (self.pose.transform_point(&Vector3::from(*s)) - point).norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    pub fn site_world(&self, idx: usize) -> Vector3<f64> {
        self.pose.transform_point(&Vector3::from(self.grasp_sites[idx]))
    }
}

/// Geometry of an elongated object relative to a socket.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InsertionGeometry {
    /// Distance from the object tip to the socket axis line.
    pub radial: f64,
    /// Angle between the object axis and the insertion direction (radians).
    pub angle: f64,
    /// How far the tip is past the entry point along the insertion direction.
    pub penetration: f64,
}

pub fn insertion_geometry(object: &SceneObject, socket_owner: &SceneObject) -> Option<InsertionGeometry> {
    let socket = socket_owner.socket?;
    let axis = socket.world_axis(&socket_owner.pose).normalize();
    let entry = socket.world_entry(&socket_owner.pose);
    let rel = object.tip() - entry;
    let penetration = rel.dot(&axis);
    let radial = (rel - axis * penetration).norm();
    let angle = object.axis().dot(&axis).clamp(-1.0, 1.0).acos();
    Some(InsertionGeometry {
        radial,
        angle,
        penetration,
    })
}
