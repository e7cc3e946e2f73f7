//! The six-camera rig: two static views, two wrist cameras and the stereo
//! pair on the camera arm.

mod render;

pub use render::{render, render_labeled, Label, Primitive, RenderScene, SceneOptions};

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::pose::Pose;
use crate::rig::{ChainId, Qpos, Rig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraId {
    StaticTop,
    StaticLow,
    WristLeft,
    WristRight,
    AvLeft,
    AvRight,
}

impl CameraId {
    /// Canonical order; frames are always stored in this order.
    pub const ALL: [CameraId; 6] = [
        CameraId::StaticTop,
        CameraId::StaticLow,
        CameraId::WristLeft,
        CameraId::WristRight,
        CameraId::AvLeft,
        CameraId::AvRight,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CameraId::StaticTop => "static_top",
            CameraId::StaticLow => "static_low",
            CameraId::WristLeft => "wrist_left",
            CameraId::WristRight => "wrist_right",
            CameraId::AvLeft => "av_left",
            CameraId::AvRight => "av_right",
        }
    }

    pub fn group(&self) -> CameraGroup {
        match self {
            CameraId::StaticTop | CameraId::StaticLow => CameraGroup::Static,
            CameraId::WristLeft | CameraId::WristRight => CameraGroup::Wrist,
            CameraId::AvLeft | CameraId::AvRight => CameraGroup::Av,
        }
    }

    pub fn index(&self) -> usize {
        *self as usize
    }

    pub fn from_index(i: usize) -> Option<CameraId> {
        CameraId::ALL.get(i).copied()
    }
}

impl fmt::Display for CameraId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CameraId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CameraId::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown camera '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraGroup {
    Av,
    Static,
    Wrist,
}

impl CameraGroup {
    pub const ALL: [CameraGroup; 3] = [CameraGroup::Av, CameraGroup::Static, CameraGroup::Wrist];

    pub fn cameras(&self) -> Vec<CameraId> {
        CameraId::ALL.into_iter().filter(|c| c.group() == *self).collect()
    }

    pub fn label(&self) -> &'static str {
        match self {
            CameraGroup::Av => "AV",
            CameraGroup::Static => "Static",
            CameraGroup::Wrist => "Wrist",
        }
    }
}

/// A subset of the six cameras, kept in canonical order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CameraSet(BTreeSet<CameraId>);

impl CameraSet {
    pub fn all() -> Self {
        Self(CameraId::ALL.into_iter().collect())
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_groups(groups: &[CameraGroup]) -> Self {
        Self(groups.iter().flat_map(|g| g.cameras()).collect())
    }

    pub fn ids(&self) -> Vec<CameraId> {
        self.0.iter().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, id: CameraId) -> bool {
        self.0.contains(&id)
    }

    pub fn is_subset(&self, other: &CameraSet) -> bool {
        self.0.is_subset(&other.0)
    }

    pub fn missing_from(&self, other: &CameraSet) -> Vec<CameraId> {
        self.0.difference(&other.0).copied().collect()
    }

    pub fn position(&self, id: CameraId) -> Option<usize> {
        self.0.iter().position(|c| *c == id)
    }

    /// The seven non-empty group combinations, in table order.
    pub fn configurations() -> Vec<(String, CameraSet)> {
        use CameraGroup::*;
        [
            vec![Av],
            vec![Av, Static],
            vec![Av, Wrist],
            vec![Av, Static, Wrist],
            vec![Static],
            vec![Static, Wrist],
            vec![Wrist],
        ]
        .into_iter()
        .map(|gs| {
            let label = gs.iter().map(|g| g.label()).collect::<Vec<_>>().join(" + ");
            (label, CameraSet::from_groups(&gs))
        })
        .collect()
    }

    /// Name used in tables: the groups covered, or the raw camera list.
    pub fn label(&self) -> String {
        let covered: Vec<CameraGroup> = CameraGroup::ALL
            .into_iter()
            .filter(|g| g.cameras().iter().all(|c| self.contains(*c)))
            .collect();
        if CameraSet::from_groups(&covered) == *self && !covered.is_empty() {
            covered.iter().map(|g| g.label()).collect::<Vec<_>>().join(" + ")
        } else {
            self.to_string()
        }
    }
}

impl FromIterator<CameraId> for CameraSet {
    fn from_iter<T: IntoIterator<Item = CameraId>>(iter: T) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl fmt::Display for CameraSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.0.iter().map(|c| c.as_str()).collect();
        f.write_str(&names.join(","))
    }
}

/// Parses a comma list of camera ids and group names (`av`, `static`, `wrist`).
impl FromStr for CameraSet {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut set = BTreeSet::new();
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match tok {
                "av" => set.extend(CameraGroup::Av.cameras()),
                "static" => set.extend(CameraGroup::Static.cameras()),
                "wrist" => set.extend(CameraGroup::Wrist.cameras()),
                "all" => set.extend(CameraId::ALL),
                other => {
                    set.insert(other.parse::<CameraId>()?);
                }
            }
        }
        if set.is_empty() {
            return Err("camera set is empty".into());
        }
        Ok(Self(set))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self {
            fx: 96.0,
            fy: 96.0,
            cx: 48.0,
            cy: 48.0,
            width: 96,
            height: 96,
        }
    }
}

impl Intrinsics {
    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Pinhole projection of a world point. `None` when the point is not in front
/// of the camera.
pub fn project(point: &Vector3<f64>, camera_pose: &Pose, k: &Intrinsics) -> Option<Projection> {
    let p = camera_pose.inverse().transform_point(point);
    if p.z <= 0.0 {
        return None;
    }
    Some(Projection {
        u: k.fx * p.x / p.z + k.cx,
        v: k.fy * p.y / p.z + k.cy,
        depth: p.z,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Mount {
    Fixed { pose: Pose },
    OnChain { chain: ChainId, offset: Pose },
    /// Right eye of a stereo pair: the partner's pose shifted by the baseline
    /// along its own x axis.
    StereoRight { left: CameraId, baseline: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub id: CameraId,
    pub intrinsics: Intrinsics,
    pub mount: Mount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub cameras: Vec<CameraModel>,
}

/// Wrist camera: behind and above the fingers, looking along the approach
/// direction, pitched 20° toward the tool axis.
fn wrist_offset() -> Pose {
    let tilt = 20f64.to_radians();
    let z = Vector3::new(tilt.cos(), 0.0, -tilt.sin());
    let x = -Vector3::y();
    let y = z.cross(&x);
    Pose::from_rotation_matrix(Vector3::new(-0.10, 0.0, 0.07), &Matrix3::from_columns(&[x, y, z]))
}

pub const DEFAULT_BASELINE: f64 = 0.063;

impl CameraRig {
    pub fn nominal() -> Self {
        Self::with(Intrinsics::default(), DEFAULT_BASELINE)
    }

    pub fn with(intrinsics: Intrinsics, baseline: f64) -> Self {
        let fixed = |eye: [f64; 3], at: [f64; 3]| Mount::Fixed {
            pose: Pose::look_at(Vector3::from(eye), Vector3::from(at)),
        };
        let mounts = [
            (CameraId::StaticTop, fixed([0.0, -0.10, 0.90], [0.0, 0.05, 0.0])),
            (CameraId::StaticLow, fixed([0.0, 0.65, 0.12], [0.0, 0.0, 0.05])),
            (
                CameraId::WristLeft,
                Mount::OnChain {
                    chain: ChainId::Left,
                    offset: wrist_offset(),
                },
            ),
            (
                CameraId::WristRight,
                Mount::OnChain {
                    chain: ChainId::Right,
                    offset: wrist_offset(),
                },
            ),
            (
                CameraId::AvLeft,
                Mount::OnChain {
                    chain: ChainId::Av,
                    offset: Pose::identity(),
                },
            ),
            (
                CameraId::AvRight,
                Mount::StereoRight {
                    left: CameraId::AvLeft,
                    baseline,
                },
            ),
        ];
        Self {
            cameras: mounts
                .into_iter()
                .map(|(id, mount)| CameraModel {
                    id,
                    intrinsics,
                    mount,
                })
                .collect(),
        }
    }

    pub fn model(&self, id: CameraId) -> &CameraModel {
        self.cameras
            .iter()
            .find(|c| c.id == id)
            .expect("camera rig holds all six cameras")
    }

    pub fn camera_pose(&self, id: CameraId, rig: &Rig, qpos: &Qpos) -> Pose {
        match self.model(id).mount {
            Mount::Fixed { pose } => pose,
            Mount::OnChain { chain, offset } => rig.tool_pose(chain, qpos).compose(&offset),
            Mount::StereoRight { left, baseline } => self
                .camera_pose(left, rig, qpos)
                .compose(&Pose::from_translation(Vector3::new(baseline, 0.0, 0.0))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub camera: CameraId,
    pub time_step: u64,
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
    pub pose: Pose,
}

impl Frame {
    pub fn pixel(&self, u: u32, v: u32) -> u8 {
        self.pixels[(v * self.width + u) as usize]
    }
}

/// 8-bit grayscale PNG of a pixel buffer.
pub fn encode_png(width: u32, height: u32, pixels: &[u8]) -> Result<Vec<u8>, png::EncodingError> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, width, height);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header()?;
    w.write_image_data(pixels)?;
    w.finish()?;
    Ok(out)
}

/// Renders every camera of `set` in canonical order.
pub fn render_set(
    scene: &RenderScene,
    cameras: &CameraRig,
    set: &CameraSet,
    rig: &Rig,
    qpos: &Qpos,
    time_step: u64,
) -> Vec<Frame> {
    set.ids()
        .into_iter()
        .map(|id| {
            let model = cameras.model(id);
            let pose = cameras.camera_pose(id, rig, qpos);
            Frame {
                camera: id,
                time_step,
                width: model.intrinsics.width,
                height: model.intrinsics.height,
                pixels: render(scene, &pose, &model.intrinsics),
                pose,
            }
        })
        .collect()
}
