use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use super::Intrinsics;
use crate::pose::Pose;
use crate::rig::{ChainId, Qpos, Rig};
use crate::sim::{SceneObject, Shape};

const T_MIN: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    None,
    Object(u16),
    Link(ChainId),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Geom {
    Sphere { r: f64 },
    Box { h: Vector3<f64>, bore: Option<Bore> },
    Cylinder { r: f64, h: f64 },
    Capsule { r: f64, h: f64 },
}

/// Through-hole along a line of the box's local frame.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Bore {
    point: Vector3<f64>,
    axis: Vector3<f64>,
    radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    geom: Geom,
    pose: Pose,
    rot_inv: Matrix3<f64>,
    pub label: Label,
}

impl Primitive {
    fn new(geom: Geom, pose: Pose, label: Label) -> Self {
        Self {
            geom,
            pose,
            rot_inv: pose.rotation_matrix().transpose(),
            label,
        }
    }

    /// Spheres (local center, radius) whose convex hull contains the shape.
    fn hull_spheres(&self) -> ([(Vector3<f64>, f64); 2], usize) {
        let z = Vector3::zeros();
        match self.geom {
            Geom::Sphere { r } => ([(z, r), (z, 0.0)], 1),
            Geom::Box { h, .. } => ([(z, h.norm()), (z, 0.0)], 1),
            Geom::Cylinder { r, h } | Geom::Capsule { r, h } => (
                [(Vector3::new(0.0, 0.0, -h), r), (Vector3::new(0.0, 0.0, h), r)],
                2,
            ),
        }
    }

    /// Nearest hit along `o + t d` (local frame), `t` in units of `d`.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        match self.geom {
            Geom::Sphere { r } => hit_sphere(o, d, &Vector3::zeros(), r),
            Geom::Box { h, bore } => hit_box(o, d, &h, bore.as_ref()),
            Geom::Cylinder { r, h } => hit_cylinder(o, d, r, h),
            Geom::Capsule { r, h } => hit_capsule(o, d, r, h),
        }
    }
}

fn first_positive(a: f64, b: f64) -> Option<f64> {
    if a > T_MIN {
        Some(a)
    } else if b > T_MIN {
        Some(b)
    } else {
        None
    }
}

fn min_opt(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, None) => x,
        (None, y) => y,
    }
}

fn hit_sphere(o: &Vector3<f64>, d: &Vector3<f64>, c: &Vector3<f64>, r: f64) -> Option<f64> {
    let oc = o - c;
    let a = d.dot(d);
    let b = oc.dot(d);
    let cc = oc.dot(&oc) - r * r;
    let disc = b * b - a * cc;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    first_positive((-b - s) / a, (-b + s) / a)
}

/// Roots of the infinite z-aligned cylinder of radius `r`.
fn side_roots(o: &Vector3<f64>, d: &Vector3<f64>, r: f64) -> Option<(f64, f64)> {
    let a = d.x * d.x + d.y * d.y;
    if a < 1e-300 {
        return None;
    }
    let b = o.x * d.x + o.y * d.y;
    let c = o.x * o.x + o.y * o.y - r * r;
    let disc = b * b - a * c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    Some(((-b - s) / a, (-b + s) / a))
}

fn hit_cylinder(o: &Vector3<f64>, d: &Vector3<f64>, r: f64, h: f64) -> Option<f64> {
    let mut best = None;
    if let Some((t0, t1)) = side_roots(o, d, r) {
        for t in [t0, t1] {
            if t > T_MIN && (o.z + t * d.z).abs() <= h {
                best = min_opt(best, Some(t));
            }
        }
    }
    if d.z.abs() > 1e-300 {
        for zc in [-h, h] {
            let t = (zc - o.z) / d.z;
            let (x, y) = (o.x + t * d.x, o.y + t * d.y);
            if t > T_MIN && x * x + y * y <= r * r {
                best = min_opt(best, Some(t));
            }
        }
    }
    best
}

fn hit_capsule(o: &Vector3<f64>, d: &Vector3<f64>, r: f64, h: f64) -> Option<f64> {
    let mut best = None;
    if let Some((t0, t1)) = side_roots(o, d, r) {
        for t in [t0, t1] {
            if t > T_MIN && (o.z + t * d.z).abs() <= h {
                best = min_opt(best, Some(t));
            }
        }
    }
    for zc in [-h, h] {
        best = min_opt(best, hit_sphere(o, d, &Vector3::new(0.0, 0.0, zc), r));
    }
    best
}

fn hit_box(o: &Vector3<f64>, d: &Vector3<f64>, h: &Vector3<f64>, bore: Option<&Bore>) -> Option<f64> {
    let (mut tn, mut tf) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..3 {
        if d[k].abs() < 1e-300 {
            if o[k].abs() > h[k] {
                return None;
            }
            continue;
        }
        let a = (-h[k] - o[k]) / d[k];
        let b = (h[k] - o[k]) / d[k];
        tn = tn.max(a.min(b));
        tf = tf.min(a.max(b));
    }
    if tn > tf || tn <= T_MIN {
        return None;
    }
    let Some(bore) = bore else { return Some(tn) };
    let w = o - bore.point;
    let wp = w - bore.axis * w.dot(&bore.axis);
    let dp = d - bore.axis * d.dot(&bore.axis);
    let a = dp.dot(&dp);
    let c = wp.dot(&wp) - bore.radius * bore.radius;
    let (c0, c1) = if a < 1e-300 {
        if c < 0.0 {
            (f64::NEG_INFINITY, f64::INFINITY)
        } else {
            return Some(tn);
        }
    } else {
        let b = wp.dot(&dp);
        let disc = b * b - a * c;
        if disc < 0.0 {
            return Some(tn);
        }
        let s = disc.sqrt();
        ((-b - s) / a, (-b + s) / a)
    };
    if c0 < tn && tn < c1 {
        // Entered through the hole mouth: either the bore wall or nothing.
        (c1 < tf).then_some(c1)
    } else {
        Some(tn)
    }
}

/// Finger length along the tool `x` axis, ending at the tool point.
const FINGER_LEN: f64 = 0.04;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneOptions {
    pub av_arm_present: bool,
    pub robot_present: bool,
    pub arm_radius: f64,
    pub av_radius: f64,
}

impl Default for SceneOptions {
    fn default() -> Self {
        Self {
            av_arm_present: true,
            robot_present: true,
            arm_radius: 0.022,
            av_radius: 0.018,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RenderScene {
    pub primitives: Vec<Primitive>,
}

fn shape_geom(shape: &Shape) -> Geom {
    match *shape {
        Shape::Sphere { r } => Geom::Sphere { r },
        Shape::Box { hx, hy, hz } => Geom::Box {
            h: Vector3::new(hx, hy, hz),
            bore: None,
        },
        Shape::Cylinder { r, half_len } => Geom::Cylinder { r, h: half_len },
        Shape::Capsule { r, half_len } => Geom::Capsule { r, h: half_len },
    }
}

impl RenderScene {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn push_shape(&mut self, shape: &Shape, pose: Pose, label: Label) {
        self.primitives.push(Primitive::new(shape_geom(shape), pose, label));
    }

    /// Adds a scene object; a box with a socket gets a through-hole of the
    /// socket radius along the socket axis.
    pub fn push_object(&mut self, obj: &SceneObject, idx: usize) {
        let mut geom = shape_geom(&obj.shape);
        if let (Geom::Box { bore, .. }, Some(s)) = (&mut geom, obj.socket) {
            *bore = Some(Bore {
                point: Vector3::from(s.entry),
                axis: Vector3::from(s.axis).normalize(),
                radius: s.radius,
            });
        }
        self.primitives
            .push(Primitive::new(geom, obj.pose, Label::Object(idx as u16)));
    }

    pub fn push_capsule_between(&mut self, a: &Vector3<f64>, b: &Vector3<f64>, r: f64, label: Label) {
        let seg = b - a;
        let len = seg.norm();
        if len < 1e-9 {
            self.push_shape(&Shape::Sphere { r }, Pose::from_translation(*a), label);
            return;
        }
        let rot = UnitQuaternion::rotation_between(&Vector3::z(), &seg)
            .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI));
        self.primitives.push(Primitive::new(
            Geom::Capsule { r, h: len / 2.0 },
            Pose::new((a + b) / 2.0, rot),
            label,
        ));
    }

    /// Objects plus link capsules and gripper fingers for the given joints.
    pub fn from_state(rig: &Rig, objects: &[SceneObject], qpos: &Qpos, opts: &SceneOptions) -> Self {
        let mut scene = Self::new();
        for (i, obj) in objects.iter().enumerate() {
            scene.push_object(obj, i);
        }
        if !opts.robot_present {
            return scene;
        }
        for id in ChainId::ALL {
            if id == ChainId::Av && !opts.av_arm_present {
                continue;
            }
            let chain = rig.chain(id);
            let frames = rig.link_frames(id, qpos);
            let mut points = vec![*chain.base_pose.translation()];
            points.extend(frames.iter().map(|f| *f.translation()));
            let (r, label) = match id {
                ChainId::Av => {
                    // Stop at the pan joint so the camera is not inside the link.
                    points.pop();
                    (opts.av_radius, Label::Link(id))
                }
                _ => (opts.arm_radius, Label::Link(id)),
            };
            if id.gripper_index().is_some() {
                // The last link ends at the finger base.
                let tool = frames[chain.dof()];
                *points.last_mut().expect("chain has a tool frame") = tool.transform_point(&Vector3::new(-FINGER_LEN, 0.0, 0.0));
            }
            for w in points.windows(2) {
                if (w[1] - w[0]).norm() > 1e-9 {
                    scene.push_capsule_between(&w[0], &w[1], r, label);
                }
            }
            if let Some(g) = id.gripper_index() {
                let tool = frames[chain.dof()];
                let open = (qpos[g] / rig.gripper.open_angle.max(1e-9)).clamp(0.0, 1.0);
                let s = 0.008 + 0.03 * open;
                for side in [-1.0, 1.0] {
                    let a = tool.transform_point(&Vector3::new(-FINGER_LEN, side * s, 0.0));
                    let b = tool.transform_point(&Vector3::new(0.0, side * s, 0.0));
                    scene.push_capsule_between(&a, &b, 0.006, label);
                }
            }
        }
        scene
    }
}

/// Pixel bounds `[u0, u1] × [v0, v1]` (inclusive) that can contain the
/// primitive, or `None` when it is entirely behind the camera or off screen.
fn screen_rect(
    prim: &Primitive,
    cam_inv: &Pose,
    k: &Intrinsics,
) -> Option<(usize, usize, usize, usize)> {
    let (w, h) = (k.width as usize, k.height as usize);
    let full = Some((0, w - 1, 0, h - 1));
    let (spheres, n) = prim.hull_spheres();
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    let mut all_behind = true;
    for (c_local, r) in &spheres[..n] {
        let c = cam_inv.transform_point(&prim.pose.transform_point(c_local));
        if c.z + r <= T_MIN {
            continue;
        }
        all_behind = false;
        let zn = c.z - r;
        if zn <= 1e-6 {
            return full;
        }
        let zf = c.z + r;
        let lo = |a: f64| if a >= 0.0 { a / zf } else { a / zn };
        let hi = |a: f64| if a >= 0.0 { a / zn } else { a / zf };
        xmin = xmin.min(lo(c.x - r));
        xmax = xmax.max(hi(c.x + r));
        ymin = ymin.min(lo(c.y - r));
        ymax = ymax.max(hi(c.y + r));
    }
    if all_behind {
        return None;
    }
    let u0 = (k.fx * xmin + k.cx).ceil();
    let u1 = (k.fx * xmax + k.cx).floor();
    let v0 = (k.fy * ymin + k.cy).ceil();
    let v1 = (k.fy * ymax + k.cy).floor();
    if u1 < 0.0 || v1 < 0.0 || u0 > (w - 1) as f64 || v0 > (h - 1) as f64 || u0 > u1 || v0 > v1 {
        return None;
    }
    Some((
        u0.max(0.0) as usize,
        u1.min((w - 1) as f64) as usize,
        v0.max(0.0) as usize,
        v1.min((h - 1) as f64) as usize,
    ))
}

fn depth_buffer(scene: &RenderScene, cam: &Pose, k: &Intrinsics, labels: Option<&mut Vec<Label>>) -> Vec<f64> {
    let (w, h) = (k.width as usize, k.height as usize);
    let mut depth = vec![f64::INFINITY; w * h];
    let mut labels = labels;
    if let Some(l) = labels.as_deref_mut() {
        l.clear();
        l.resize(w * h, Label::None);
    }
    let cam_inv = cam.inverse();
    let cam_rot = cam.rotation_matrix();
    for prim in &scene.primitives {
        let Some((u0, u1, v0, v1)) = screen_rect(prim, &cam_inv, k) else {
            continue;
        };
        let m = prim.rot_inv * cam_rot;
        let o = prim.rot_inv * (cam.translation() - prim.pose.translation());
        let (cx_dir, cy_dir, cz_dir) = (m.column(0).into_owned(), m.column(1).into_owned(), m.column(2).into_owned());
        for v in v0..=v1 {
            let b = (v as f64 - k.cy) / k.fy;
            let row = cz_dir + cy_dir * b;
            for u in u0..=u1 {
                let a = (u as f64 - k.cx) / k.fx;
                let d = row + cx_dir * a;
                if let Some(t) = prim.intersect(&o, &d) {
                    let idx = v * w + u;
                    if t < depth[idx] {
                        depth[idx] = t;
                        if let Some(l) = labels.as_deref_mut() {
                            l[idx] = prim.label;
                        }
                    }
                }
            }
        }
    }
    depth
}

fn shade(depth: &[f64]) -> Vec<u8> {
    depth
        .iter()
        .map(|&z| {
            if z.is_finite() {
                (255.0 / (1.0 + z)).round() as u8
            } else {
                0
            }
        })
        .collect()
}

/// Ray casts one frame. Pixel `(u, v)` looks along `((u − cx)/fx, (v − cy)/fy, 1)`
/// in the camera frame, so the hit parameter is the z-depth; the nearest hit is
/// shaded `255 / (1 + depth)` and misses are 0.
pub fn render(scene: &RenderScene, camera_pose: &Pose, k: &Intrinsics) -> Vec<u8> {
    shade(&depth_buffer(scene, camera_pose, k, None))
}

/// As [`render`], also reporting which primitive each pixel shows.
pub fn render_labeled(scene: &RenderScene, camera_pose: &Pose, k: &Intrinsics) -> (Vec<u8>, Vec<Label>) {
    let mut labels = Vec::new();
    let depth = depth_buffer(scene, camera_pose, k, Some(&mut labels));
    (shade(&depth), labels)
}

#[cfg(test)]
pub(super) mod tests_support {
    use super::Primitive;
    use nalgebra::Vector3;

    pub fn intersect(p: &Primitive, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        p.intersect(o, d)
    }
}
