use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{insertion_geometry, SceneObject, Shape, Socket};
use crate::pose::Pose;
use crate::rig::ChainId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    PegInsertion,
    SlotInsertion,
    ThreadNeedle,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::PegInsertion, TaskId::SlotInsertion, TaskId::ThreadNeedle];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskId::PegInsertion => "peg_insertion",
            TaskId::SlotInsertion => "slot_insertion",
            TaskId::ThreadNeedle => "thread_needle",
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown task '{s}' (expected peg_insertion, slot_insertion or thread_needle)"))
    }
}

/// Axis-aligned sampling rectangle for an object's center on the table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x: [f64; 2],
    pub y: [f64; 2],
}

impl Region {
    fn sample(&self, rng: &mut impl Rng) -> (f64, f64) {
        let x = self.x[0] + (self.x[1] - self.x[0]) * rng.random::<f64>();
        let y = self.y[0] + (self.y[1] - self.y[0]) * rng.random::<f64>();
        (x, y)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (self.x[0]..=self.x[1]).contains(&x) && (self.y[0]..=self.y[1]).contains(&y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub task: TaskId,
    /// Rollout length in 50 Hz steps.
    pub horizon: u64,
    pub align_tol_deg: f64,
    /// Socket radius as a multiple of the inserted object's radius.
    pub socket_radius_slack: f64,
    pub regions: BTreeMap<String, Region>,
}

impl TaskConfig {
    pub fn default_for(task: TaskId) -> Self {
        let region = |x: [f64; 2], y: [f64; 2]| Region { x, y };
        let regions: BTreeMap<String, Region> = match task {
            TaskId::PegInsertion => [
                ("peg", region([0.10, 0.20], [0.00, 0.10])),
                ("socket", region([-0.20, -0.10], [0.00, 0.10])),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
            TaskId::SlotInsertion => [
                ("stick", region([0.02, 0.08], [0.00, 0.08])),
                ("slot", region([-0.18, -0.18], [0.00, 0.08])),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
            TaskId::ThreadNeedle => [
                ("needle", region([0.10, 0.18], [0.00, 0.08])),
                ("wall", region([-0.12, -0.06], [0.02, 0.10])),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        };
        Self {
            task,
            horizon: 300,
            align_tol_deg: 15.0,
            socket_radius_slack: 1.5,
            regions,
        }
    }

    pub fn region(&self, name: &str) -> Region {
        self.regions
            .get(name)
            .copied()
            .unwrap_or_else(|| TaskConfig::default_for(self.task).regions[name])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Predicate {
    /// Every `(object, chain)` pair has the chain's gripper closed on the object.
    Held { holds: Vec<(String, ChainId)> },
    /// The object's tip is inside the socket of `socket_owner`.
    Inserted { object: String, socket_owner: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub predicate: Predicate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub config: TaskConfig,
    pub stages: Vec<Stage>,
}

/// Lying on the table with the tip (local `+z`) toward world `-x`.
fn lying_toward_minus_x(x: f64, y: f64, z: f64) -> Pose {
    Pose::new(
        Vector3::new(x, y, z),
        nalgebra::UnitQuaternion::from_axis_angle(&Vector3::y_axis(), -FRAC_PI_2),
    )
}

const INTO_MINUS_X: [f64; 3] = [-1.0, 0.0, 0.0];

impl TaskSpec {
    pub fn new(config: TaskConfig) -> Self {
        let stage = |name: &str, predicate| Stage {
            name: name.to_string(),
            predicate,
        };
        let held = |holds: &[(&str, ChainId)]| Predicate::Held {
            holds: holds.iter().map(|(o, c)| (o.to_string(), *c)).collect(),
        };
        let inserted = |object: &str, socket_owner: &str| Predicate::Inserted {
            object: object.to_string(),
            socket_owner: socket_owner.to_string(),
        };
        let stages = match config.task {
            TaskId::PegInsertion => vec![
                stage("Grasp", held(&[("peg", ChainId::Right), ("socket", ChainId::Left)])),
                stage("Insert", inserted("peg", "socket")),
            ],
            TaskId::SlotInsertion => vec![
                stage("Grasp", held(&[("stick", ChainId::Left), ("stick", ChainId::Right)])),
                stage("Insert", inserted("stick", "slot")),
            ],
            TaskId::ThreadNeedle => vec![
                stage("Grasp", held(&[("needle", ChainId::Right)])),
                stage("Thread", inserted("needle", "wall")),
            ],
        };
        Self { config, stages }
    }

    pub fn for_task(task: TaskId) -> Self {
        Self::new(TaskConfig::default_for(task))
    }

    pub fn id(&self) -> TaskId {
        self.config.task
    }

    pub fn stage_names(&self) -> Vec<&str> {
        self.stages.iter().map(|s| s.name.as_str()).collect()
    }

    /// Initial objects; a pure function of the configuration and seed.
    pub fn sample_scene(&self, seed: u64) -> Vec<SceneObject> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slack = self.config.socket_radius_slack;
        match self.config.task {
            TaskId::PegInsertion => {
                let (px, py) = self.config.region("peg").sample(&mut rng);
                let (sx, sy) = self.config.region("socket").sample(&mut rng);
                let peg_r = 0.01;
                let peg = SceneObject::new(
                    "peg",
                    Shape::Cylinder { r: peg_r, half_len: 0.05 },
                    lying_toward_minus_x(px, py, peg_r),
                )
                .graspable_at(&[[0.0, 0.0, -0.015]]);
                let socket = SceneObject::new(
                    "socket",
                    Shape::Box { hx: 0.04, hy: 0.025, hz: 0.025 },
                    Pose::from_translation(Vector3::new(sx, sy, 0.025)),
                )
                .graspable_at(&[[-0.01, 0.0, 0.0]])
                .with_socket(Socket {
                    axis: INTO_MINUS_X,
                    entry: [0.04, 0.0, 0.0],
                    depth: 0.03,
                    radius: slack * peg_r,
                });
                vec![peg, socket]
            }
            TaskId::SlotInsertion => {
                let (kx, ky) = self.config.region("stick").sample(&mut rng);
                let (lx, ly) = self.config.region("slot").sample(&mut rng);
                let stick_r = 0.012;
                let stick = SceneObject::new(
                    "stick",
                    Shape::Cylinder { r: stick_r, half_len: 0.12 },
                    lying_toward_minus_x(kx, ky, stick_r),
                )
                .graspable_at(&[[0.0, 0.0, 0.06], [0.0, 0.0, -0.06]]);
                let slot = SceneObject::new(
                    "slot",
                    Shape::Box { hx: 0.03, hy: 0.04, hz: 0.08 },
                    Pose::from_translation(Vector3::new(lx, ly, 0.08)),
                )
                .with_socket(Socket {
                    axis: INTO_MINUS_X,
                    entry: [0.03, 0.0, 0.04],
                    depth: 0.04,
                    radius: slack * stick_r,
                });
                vec![stick, slot]
            }
            TaskId::ThreadNeedle => {
                let (nx, ny) = self.config.region("needle").sample(&mut rng);
                let (wx, wy) = self.config.region("wall").sample(&mut rng);
                let needle_r = 0.005;
                let needle = SceneObject::new(
                    "needle",
                    Shape::Cylinder { r: needle_r, half_len: 0.06 },
                    lying_toward_minus_x(nx, ny, needle_r),
                )
                .graspable_at(&[[0.0, 0.0, -0.02]]);
                // The hole runs along x: edge-on for a camera above the table
                // and for one looking along y.
                let wall = SceneObject::new(
                    "wall",
                    Shape::Box { hx: 0.015, hy: 0.05, hz: 0.06 },
                    Pose::from_translation(Vector3::new(wx, wy, 0.06)),
                )
                .with_socket(Socket {
                    axis: INTO_MINUS_X,
                    entry: [0.015, 0.0, 0.01],
                    depth: 0.04,
                    radius: slack * needle_r,
                });
                vec![needle, wall]
            }
        }
    }

    pub fn evaluate(&self, stage: usize, objects: &[SceneObject]) -> bool {
        let find = |name: &str| objects.iter().find(|o| o.name == name);
        match &self.stages[stage].predicate {
            Predicate::Held { holds } => holds
                .iter()
                .all(|(name, chain)| find(name).is_some_and(|o| o.is_held_by(*chain))),
            Predicate::Inserted { object, socket_owner } => {
                let (Some(obj), Some(owner)) = (find(object), find(socket_owner)) else {
                    return false;
                };
                let Some(g) = insertion_geometry(obj, owner) else {
                    return false;
                };
                let socket = owner.socket.expect("geometry implies socket");
                g.radial <= socket.radius
                    && g.angle < self.config.align_tol_deg.to_radians()
                    && g.penetration >= socket.depth
            }
        }
    }
}
