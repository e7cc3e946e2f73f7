//! Scripted demonstrator: plays the human operator for dataset generation.
//!
//! The script works in task space from the live simulator state (approach,
//! grasp, lift, align, insert) and emits device poses through the teleop
//! anchor, so every demonstration goes through the same mapping and IK as a
//! human session.

use nalgebra::{UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraRig, CameraSet, SceneOptions};
use crate::episode::{
    episode_file_name, manifest_for, observe_frames, quantize_action, step_record, DatasetSummary, EpisodeError,
    EpisodeSummary, EpisodeWriter, RecordSink,
};
use crate::pose::Pose;
use crate::rig::{ChainId, Qpos};
use crate::sim::{SceneObject, SimState, Simulator, TaskId};
use crate::teleop::{DeviceFrame, DeviceId, TeleopAnchor, TeleopConfig, TeleopSession};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseStd {
    pub meters: f64,
    pub radians: f64,
}

impl NoiseStd {
    pub const ZERO: NoiseStd = NoiseStd {
        meters: 0.0,
        radians: 0.0,
    };
}

impl Default for NoiseStd {
    fn default() -> Self {
        Self {
            meters: 0.005,
            radians: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatorConfig {
    pub noise: NoiseStd,
    pub max_attempts: u32,
    /// Half-width of the uniform eye shift applied to the camera vantage on
    /// retries (meters).
    pub vantage_jitter: f64,
    /// Fixed shift of the camera eye from the task vantage (meters).
    pub vantage_offset: [f64; 3],
    /// Ticks kept after the last stage latches.
    pub tail_ticks: u64,
    pub teleop: TeleopConfig,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        Self {
            noise: NoiseStd::default(),
            max_attempts: 5,
            vantage_jitter: 0.04,
            vantage_offset: [0.0; 3],
            tail_ticks: 10,
            teleop: TeleopConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OperatorError {
    #[error("IK failed in phase '{phase}' on every one of {attempts} attempts")]
    IkFailure { phase: &'static str, attempts: u32 },
    #[error(transparent)]
    Episode(#[from] EpisodeError),
}

/// Operator-side poses at anchoring time (y-up device frame).
pub fn device_rest_poses() -> [Pose; 3] {
    [
        Pose::from_translation(Vector3::new(0.0, 1.6, 0.0)),
        Pose::from_translation(Vector3::new(-0.2, 1.2, -0.3)),
        Pose::from_translation(Vector3::new(0.2, 1.2, -0.3)),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Reach,
    Descend,
    Close,
    Lift,
    Present,
    Insert,
    Hold,
}

impl Phase {
    fn name(&self) -> &'static str {
        match self {
            Phase::Reach => "reach",
            Phase::Descend => "descend",
            Phase::Close => "close",
            Phase::Lift => "lift",
            Phase::Present => "present",
            Phase::Insert => "insert",
            Phase::Hold => "hold",
        }
    }
}

/// `(phase, total ticks, ticks spent moving; the rest is settling)`.
const SCRIPT: [(Phase, u64, u64); 7] = [
    (Phase::Reach, 45, 35),
    (Phase::Descend, 22, 14),
    (Phase::Close, 12, 0),
    (Phase::Lift, 20, 14),
    (Phase::Present, 50, 38),
    (Phase::Insert, 36, 24),
    (Phase::Hold, 40, 0),
];

const HOVER: f64 = 0.08;
const LIFT: f64 = 0.09;
const STANDOFF: f64 = 0.03;
const OVERSHOOT: f64 = 0.008;

/// Top-down grasp orientation: tool `x` along world `-z`, yawed so each arm
/// keeps its wrist unwound.
pub fn top_down(chain: ChainId) -> UnitQuaternion<f64> {
    let yaw = if chain == ChainId::Right { std::f64::consts::PI } else { 0.0 };
    UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw)
        * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), std::f64::consts::FRAC_PI_2)
}

struct TaskScript {
    /// `(object, grasp site)` per manipulator; `None` leaves the arm parked.
    left: Option<(&'static str, usize)>,
    right: Option<(&'static str, usize)>,
    /// Object driven into the socket and the socket owner.
    inserted: &'static str,
    socket_owner: &'static str,
    /// Where the left arm presents a hand-held socket.
    socket_meet: Option<Vector3<f64>>,
}

fn script_for(task: TaskId) -> TaskScript {
    match task {
        TaskId::PegInsertion => TaskScript {
            left: Some(("socket", 0)),
            right: Some(("peg", 0)),
            inserted: "peg",
            socket_owner: "socket",
            socket_meet: Some(Vector3::new(-0.03, 0.05, 0.12)),
        },
        TaskId::SlotInsertion => TaskScript {
            left: Some(("stick", 0)),
            right: Some(("stick", 1)),
            inserted: "stick",
            socket_owner: "slot",
            socket_meet: None,
        },
        TaskId::ThreadNeedle => TaskScript {
            left: None,
            right: Some(("needle", 0)),
            inserted: "needle",
            socket_owner: "wall",
            socket_meet: None,
        },
    }
}

/// Camera-arm vantage for a scene: eye and look-at point.
pub fn vantage(task: TaskId, objects: &[SceneObject]) -> (Vector3<f64>, Vector3<f64>) {
    let find = |n: &str| objects.iter().find(|o| o.name == n).expect("task objects present");
    match task {
        TaskId::PegInsertion => {
            let at = Vector3::new(-0.04, 0.05, 0.11);
            (at + Vector3::new(0.06, -0.28, 0.22), at)
        }
        TaskId::SlotInsertion => {
            let slot = find("slot");
            let entry = slot.socket.expect("slot has a socket").world_entry(&slot.pose);
            let at = entry + Vector3::new(0.05, 0.0, 0.0);
            (at + Vector3::new(0.08, -0.28, 0.18), at)
        }
        TaskId::ThreadNeedle => {
            // In front of the hole mouth, ~24° off its axis.
            let wall = find("wall");
            let entry = wall.socket.expect("wall has a socket").world_entry(&wall.pose);
            (entry + Vector3::new(0.25, -0.08, 0.08), entry)
        }
    }
}

/// Angle between the camera's optical axis and a socket's insertion axis.
pub fn view_angle_to_socket(camera: &Pose, owner: &SceneObject) -> Option<f64> {
    let socket = owner.socket?;
    let axis = socket.world_axis(&owner.pose).normalize();
    let view = camera.transform_vector(&Vector3::z());
    Some(view.dot(&axis).clamp(-1.0, 1.0).acos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub task: TaskId,
    pub seed: u64,
    /// Joint targets applied at each step, already rounded to `f32`.
    pub actions: Vec<Qpos>,
    pub device_stream: Vec<DeviceFrame>,
    pub stage_flags: Vec<bool>,
    pub attempts: u32,
    pub vantage: (Vector3<f64>, Vector3<f64>),
    /// Camera-to-socket-axis angle when the insert phase begins.
    pub insert_view_angle: Option<f64>,
}

impl Demonstration {
    pub fn succeeded(&self) -> bool {
        self.stage_flags.iter().all(|f| *f)
    }
}

struct Attempt {
    actions: Vec<Qpos>,
    stream: Vec<DeviceFrame>,
    flags: Vec<bool>,
    insert_view_angle: Option<f64>,
}

fn smoothstep(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * (3.0 - 2.0 * s)
}

fn object<'a>(state: &'a SimState, name: &str) -> &'a SceneObject {
    state.object(name).expect("task objects present")
}

/// Nominal lying orientation (`+z` toward world `-x`) turned onto `axis`.
fn aligned_rotation(axis: &Vector3<f64>) -> UnitQuaternion<f64> {
    let lying = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), -std::f64::consts::FRAC_PI_2);
    let turn = UnitQuaternion::rotation_between(&-Vector3::x(), axis).unwrap_or_else(UnitQuaternion::identity);
    turn * lying
}

/// Tool pose that puts a held object at `desired`.
fn tool_for(obj: &SceneObject, chain: ChainId, desired: &Pose) -> Option<Pose> {
    let a = obj.attachment_for(chain)?;
    Some(desired.compose(&a.offset.inverse()))
}

fn run_attempt(
    sim: &Simulator,
    seed: u64,
    cfg: &OperatorConfig,
    vantage: (Vector3<f64>, Vector3<f64>),
    attempt: u32,
) -> Result<Attempt, &'static str> {
    let task = sim.task.id();
    let script = script_for(task);
    let rig = &sim.rig;
    let mut state = sim.reset(seed);
    let mut session = TeleopSession::new(cfg.teleop, rig);
    let rest = device_rest_poses();
    let anchor: TeleopAnchor = session
        .anchor_at(&DeviceFrame::new(rest, [0.0, 0.0], 0), rig, &state.qpos)
        .expect("all three devices present")
        .clone();

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ attempt as u64);
    let n_t = Normal::new(0.0, cfg.noise.meters.max(0.0)).expect("finite std");
    let n_r = Normal::new(0.0, cfg.noise.radians.max(0.0)).expect("finite std");

    let av_goal = Pose::look_at(vantage.0, vantage.1);
    let init = sim.tool_poses(&state.qpos);
    let mut commanded = init;
    let mut triggers = [0.0; 2];
    let mut out = Attempt {
        actions: Vec::new(),
        stream: Vec::new(),
        flags: Vec::new(),
        insert_view_angle: None,
    };
    let horizon = sim.task.config.horizon;
    let mut done_at: Option<u64> = None;

    'script: for (phase, ticks, move_ticks) in SCRIPT {
        let seg_start = commanded;
        if phase == Phase::Insert && out.insert_view_angle.is_none() {
            let cam = rig.tool_pose(ChainId::Av, &state.qpos);
            out.insert_view_angle = view_angle_to_socket(&cam, object(&state, script.socket_owner));
        }
        if phase == Phase::Close {
            triggers = [
                if script.left.is_some() { 1.0 } else { 0.0 },
                if script.right.is_some() { 1.0 } else { 0.0 },
            ];
        }
        for k in 0..ticks {
            if state.time_step >= horizon || done_at.is_some_and(|t| state.time_step >= t + cfg.tail_ticks) {
                break 'script;
            }
            let s = if move_ticks == 0 { 1.0 } else { smoothstep((k + 1) as f64 / move_ticks as f64) };
            let goals = goals(&script, phase, &state, &seg_start);
            for (c, g) in [ChainId::Left, ChainId::Right].into_iter().zip(goals) {
                if let Some(g) = g {
                    commanded[c as usize] = seg_start[c as usize].interpolate(&g, s);
                }
            }
            let av_s = smoothstep((state.time_step + 1) as f64 / 60.0);
            commanded[ChainId::Av as usize] = init[ChainId::Av as usize].interpolate(&av_goal, av_s);

            let mut poses = [Pose::identity(); 3];
            for d in DeviceId::ALL {
                let p = anchor.device_pose_for(d, &commanded[d.chain() as usize]);
                let dt = Vector3::new(n_t.sample(&mut rng), n_t.sample(&mut rng), n_t.sample(&mut rng));
                let dr = Vector3::new(n_r.sample(&mut rng), n_r.sample(&mut rng), n_r.sample(&mut rng));
                poses[d.index()] = Pose::new(
                    p.translation() + dt,
                    UnitQuaternion::from_scaled_axis(dr) * p.rotation(),
                );
            }
            let frame = DeviceFrame::new(poses, triggers, state.time_step * 20_000);
            let (targets, tel) = session.targets(&frame, rig);
            if k + 1 == ticks && tel.ik.iter().any(|r| !r.converged) {
                return Err(phase.name());
            }
            let action = quantize_action(rig, &targets);
            out.stream.push(frame);
            out.actions.push(action);
            sim.step(&mut state, &action);
            if done_at.is_none() && state.all_stages_done() {
                done_at = Some(state.time_step);
            }
        }
    }
    out.flags = state.stage_flags();
    Ok(out)
}

/// Robot-frame tool goals for the two manipulators in `phase`.
fn goals(script: &TaskScript, phase: Phase, state: &SimState, seg_start: &[Pose; 3]) -> [Option<Pose>; 2] {
    let mut out = [None, None];
    let hands = [(ChainId::Left, script.left), (ChainId::Right, script.right)];
    for (i, (chain, grasp)) in hands.into_iter().enumerate() {
        let Some((name, site)) = grasp else { continue };
        let obj = object(state, name);
        let grasp_pose = |lift: f64| {
            // Sites are fixed on the object until someone picks it up.
            Pose::new(obj.site_world(site) + Vector3::new(0.0, 0.0, lift), top_down(chain))
        };
        out[i] = match phase {
            Phase::Reach => Some(grasp_pose(HOVER)),
            Phase::Descend => Some(grasp_pose(0.0)),
            Phase::Close => Some(seg_start[chain as usize]),
            Phase::Lift => Some(seg_start[chain as usize].translated(Vector3::new(0.0, 0.0, LIFT))),
            Phase::Present | Phase::Insert | Phase::Hold => {
                let desired = presented_pose(script, phase, state, chain);
                match desired.and_then(|(obj_name, d)| tool_for(object(state, obj_name), chain, &d)) {
                    Some(t) => Some(t),
                    None => Some(seg_start[chain as usize]),
                }
            }
        };
    }
    out
}

/// Desired pose of whichever object `chain` carries during the transport phases.
fn presented_pose(script: &TaskScript, phase: Phase, state: &SimState, chain: ChainId) -> Option<(&'static str, Pose)> {
    let owner = object(state, script.socket_owner);
    let holding_socket = script.left.is_some_and(|(n, _)| n == script.socket_owner) && chain == ChainId::Left;
    if holding_socket {
        let meet = script.socket_meet.expect("hand-held sockets have a meeting point");
        return Some((script.socket_owner, Pose::new(meet, UnitQuaternion::identity())));
    }
    let socket = owner.socket.expect("socket owner has a socket");
    let axis = socket.world_axis(&owner.pose).normalize();
    let entry = socket.world_entry(&owner.pose);
    let obj = object(state, script.inserted);
    let tip = match phase {
        Phase::Present => entry - axis * STANDOFF,
        _ => entry + axis * (socket.depth + OVERSHOOT),
    };
    let rot = aligned_rotation(&axis);
    let center = tip - rot * obj.shape.tip_local();
    Some((script.inserted, Pose::new(center, rot)))
}

/// Runs the script for one seed, retrying with a shifted camera vantage when
/// IK cannot reach a waypoint.
pub fn demonstrate(sim: &Simulator, seed: u64, cfg: &OperatorConfig) -> Result<Demonstration, OperatorError> {
    let (eye, at) = vantage(sim.task.id(), &sim.reset(seed).objects);
    let base = (eye + Vector3::from(cfg.vantage_offset), at);
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_A11);
    let u = Uniform::new_inclusive(-cfg.vantage_jitter, cfg.vantage_jitter).expect("finite jitter");
    let mut last_phase = "reach";
    let attempts = cfg.max_attempts.max(1);
    for attempt in 0..attempts {
        let v = if attempt == 0 {
            base
        } else {
            let d = Vector3::new(u.sample(&mut jitter_rng), u.sample(&mut jitter_rng), u.sample(&mut jitter_rng));
            (base.0 + d, base.1)
        };
        match run_attempt(sim, seed, cfg, v, attempt) {
            Ok(a) => {
                return Ok(Demonstration {
                    task: sim.task.id(),
                    seed,
                    actions: a.actions,
                    device_stream: a.stream,
                    stage_flags: a.flags,
                    attempts: attempt + 1,
                    vantage: v,
                    insert_view_angle: a.insert_view_angle,
                })
            }
            Err(phase) => last_phase = phase,
        }
    }
    Err(OperatorError::IkFailure {
        phase: last_phase,
        attempts,
    })
}

/// Plays `actions` from `seed`, rendering `set` before each step into `sink`.
/// Returns the final simulator state.
pub fn record_actions(
    sim: &Simulator,
    cameras: &CameraRig,
    seed: u64,
    actions: &[Qpos],
    set: &CameraSet,
    opts: &SceneOptions,
    sink: &mut dyn RecordSink,
) -> Result<SimState, EpisodeError> {
    let mut state = sim.reset(seed);
    for action in actions {
        let frames = observe_frames(sim, cameras, set, &state, opts);
        sink.push_step(step_record(&state, action, frames))?;
        sim.step(&mut state, action);
    }
    Ok(state)
}

/// Writes one demonstration per seed into `dir` plus `summary.json`.
pub fn record_dataset(
    sim: &Simulator,
    cameras: &CameraRig,
    seeds: &[u64],
    set: &CameraSet,
    cfg: &OperatorConfig,
    dir: &std::path::Path,
) -> Result<DatasetSummary, OperatorError> {
    std::fs::create_dir_all(dir).map_err(EpisodeError::from)?;
    let opts = SceneOptions::default();
    let mut episodes = Vec::with_capacity(seeds.len());
    let mut stage_counts = vec![0; sim.task.stages.len()];
    for (i, &seed) in seeds.iter().enumerate() {
        let demo = demonstrate(sim, seed, cfg)?;
        let file = episode_file_name(i);
        let path = dir.join(&file);
        let manifest = manifest_for(sim, cameras, seed, set.clone(), opts.av_arm_present, "scripted");
        let mut writer = EpisodeWriter::create(&path, manifest)?;
        let end = record_actions(sim, cameras, seed, &demo.actions, set, &opts, &mut writer)?;
        let manifest = writer.finish()?;
        let flags = end.stage_flags();
        for (c, f) in stage_counts.iter_mut().zip(&flags) {
            *c += *f as usize;
        }
        let bytes = std::fs::read(&path).map_err(EpisodeError::from)?;
        let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("footer crc"));
        episodes.push(EpisodeSummary {
            file,
            seed,
            step_count: manifest.step_count,
            stage_flags: flags,
            attempts: demo.attempts,
            bytes: bytes.len() as u64,
            crc32: format!("{crc:08x}"),
        });
    }
    let summary = DatasetSummary {
        task: sim.task.id().to_string(),
        stages: sim.task.stage_names().iter().map(|s| s.to_string()).collect(),
        camera_set: set.clone(),
        noise_std: [cfg.noise.meters, cfg.noise.radians],
        episode_count: episodes.len(),
        stage_counts,
        episodes,
    };
    summary.save(dir)?;
    Ok(summary)
}
