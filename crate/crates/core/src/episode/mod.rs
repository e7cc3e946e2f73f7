//! Fixed-rate episode files: recording, loading, camera slicing, re-rendering
//! and replay checking.

mod format;

pub use format::{
    Episode, EpisodeError, EpisodeManifest, EpisodeWriter, LoadOptions, RecordSink, StepRecord, FOOTER_LEN,
    FORMAT_VERSION, RATE_HZ,
};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::{render, CameraRig, CameraSet, RenderScene, SceneOptions};
use crate::pose::Pose;
use crate::rig::{Qpos, Rig, QPOS_LEN};
use crate::sim::{SimConfig, SimState, Simulator, TaskSpec};

pub fn quantize_qpos(q: &Qpos) -> [f32; QPOS_LEN] {
    q.map(|v| v as f32)
}

pub fn widen_qpos(q: &[f32; QPOS_LEN]) -> Qpos {
    q.map(|v| v as f64)
}

/// Rounds an action to what a record can hold, so the applied and the stored
/// action are the same numbers. Rounding never leaves the joint limits.
pub fn quantize_action(rig: &Rig, q: &Qpos) -> Qpos {
    let limits = rig.qpos_limits();
    std::array::from_fn(|i| {
        let (lo, hi) = limits[i];
        let mut v = q[i].clamp(lo, hi) as f32;
        if (v as f64) > hi {
            v = v.next_down();
        } else if (v as f64) < lo {
            v = v.next_up();
        }
        v as f64
    })
}

pub fn pose_to_f32(p: &Pose) -> [f32; 7] {
    let t = p.translation();
    let q = p.quaternion_wxyz();
    [t.x, t.y, t.z, q[0], q[1], q[2], q[3]].map(|v| v as f32)
}

/// Manifest for an episode recorded from `sim` with the given cameras.
pub fn manifest_for(
    sim: &Simulator,
    cameras: &CameraRig,
    seed: u64,
    camera_set: CameraSet,
    av_arm_present: bool,
    source: &str,
) -> EpisodeManifest {
    let state = sim.reset(seed);
    let model = &cameras.cameras[0];
    let baseline = cameras
        .cameras
        .iter()
        .find_map(|c| match c.mount {
            crate::camera::Mount::StereoRight { baseline, .. } => Some(baseline),
            _ => None,
        })
        .unwrap_or(crate::camera::DEFAULT_BASELINE);
    EpisodeManifest {
        format_version: FORMAT_VERSION,
        task: sim.task.config.clone(),
        seed,
        rate_hz: RATE_HZ,
        camera_set,
        av_arm_present,
        intrinsics: model.intrinsics,
        baseline,
        object_names: state.objects.iter().map(|o| o.name.clone()).collect(),
        chain_checksums: sim.rig.checksums(),
        source: source.to_string(),
        step_count: 0,
    }
}

/// Renders the cameras of `set` for a simulator state.
pub fn observe_frames(
    sim: &Simulator,
    cameras: &CameraRig,
    set: &CameraSet,
    state: &SimState,
    opts: &SceneOptions,
) -> Vec<Vec<u8>> {
    if set.is_empty() {
        return Vec::new();
    }
    let scene = RenderScene::from_state(&sim.rig, &state.objects, &state.qpos, opts);
    set.ids()
        .into_iter()
        .map(|id| {
            let pose = cameras.camera_pose(id, &sim.rig, &state.qpos);
            render(&scene, &pose, &cameras.model(id).intrinsics)
        })
        .collect()
}

pub fn step_record(state: &SimState, action: &Qpos, frames: Vec<Vec<u8>>) -> StepRecord {
    StepRecord {
        time_step: state.time_step as u32,
        qpos: quantize_qpos(&state.qpos),
        action: quantize_qpos(action),
        object_poses: state.objects.iter().map(|o| pose_to_f32(&o.pose)).collect(),
        frames,
    }
}

/// Simulator and cameras an episode was recorded with.
pub fn simulator_for(manifest: &EpisodeManifest, rig: &Rig) -> Result<(Simulator, CameraRig), EpisodeError> {
    let sums = rig.checksums();
    for (name, a, b) in [
        ("left", &sums.left, &manifest.chain_checksums.left),
        ("right", &sums.right, &manifest.chain_checksums.right),
        ("av", &sums.av, &manifest.chain_checksums.av),
    ] {
        if a != b {
            return Err(EpisodeError::ChainMismatch(name.to_string()));
        }
    }
    let sim = Simulator::new(rig.clone(), TaskSpec::new(manifest.task.clone()), SimConfig::default());
    Ok((sim, CameraRig::with(manifest.intrinsics, manifest.baseline)))
}

/// Restricts frames to `subset`; every other byte is carried over unchanged.
pub fn slice_cameras(episode: &Episode, subset: &CameraSet) -> Result<Episode, EpisodeError> {
    if !subset.is_subset(&episode.manifest.camera_set) {
        let missing: Vec<String> = subset
            .missing_from(&episode.manifest.camera_set)
            .iter()
            .map(|c| c.to_string())
            .collect();
        return Err(EpisodeError::MissingCameras(missing.join(",")));
    }
    let keep: Vec<usize> = subset
        .ids()
        .iter()
        .map(|c| episode.manifest.camera_set.position(*c).expect("subset checked"))
        .collect();
    let mut manifest = episode.manifest.clone();
    manifest.camera_set = subset.clone();
    let steps = episode
        .steps
        .iter()
        .map(|s| StepRecord {
            frames: keep.iter().map(|&i| s.frames[i].clone()).collect(),
            ..s.clone()
        })
        .collect();
    Ok(Episode { manifest, steps })
}

/// Replays the stored actions and renders new frames; joints, actions and
/// object poses are copied from the source.
pub fn rerender(
    episode: &Episode,
    rig: &Rig,
    camera_set: &CameraSet,
    av_arm_present: bool,
) -> Result<Episode, EpisodeError> {
    let (sim, cameras) = simulator_for(&episode.manifest, rig)?;
    let opts = SceneOptions {
        av_arm_present,
        ..SceneOptions::default()
    };
    let mut manifest = episode.manifest.clone();
    manifest.camera_set = camera_set.clone();
    manifest.av_arm_present = av_arm_present;
    let mut state = sim.reset(manifest.seed);
    let mut steps = Vec::with_capacity(episode.steps.len());
    for rec in &episode.steps {
        let frames = observe_frames(&sim, &cameras, camera_set, &state, &opts);
        steps.push(StepRecord {
            frames,
            ..rec.clone()
        });
        sim.step(&mut state, &widen_qpos(&rec.action));
    }
    Ok(Episode { manifest, steps })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: u64,
    pub field: String,
    pub recorded: f32,
    pub replayed: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub steps_checked: u64,
    pub first_divergence: Option<Divergence>,
    pub final_stage_flags: Vec<bool>,
}

impl ReplayReport {
    pub fn is_clean(&self) -> bool {
        self.first_divergence.is_none()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReplayOptions {
    /// Also re-render every frame and compare pixels.
    pub check_frames: bool,
}

/// Feeds the recorded actions to a fresh simulator from the recorded seed and
/// compares joints and object poses, bit for bit, at every step.
pub fn replay(episode: &Episode, rig: &Rig) -> Result<ReplayReport, EpisodeError> {
    replay_with(episode, rig, ReplayOptions::default())
}

pub fn replay_with(episode: &Episode, rig: &Rig, opts: ReplayOptions) -> Result<ReplayReport, EpisodeError> {
    let (sim, cameras) = simulator_for(&episode.manifest, rig)?;
    let scene_opts = SceneOptions {
        av_arm_present: episode.manifest.av_arm_present,
        ..SceneOptions::default()
    };
    let set = &episode.manifest.camera_set;
    let mut state = sim.reset(episode.manifest.seed);
    let names = &episode.manifest.object_names;
    let mut report = ReplayReport {
        steps_checked: 0,
        first_divergence: None,
        final_stage_flags: state.stage_flags(),
    };
    for (i, rec) in episode.steps.iter().enumerate() {
        let diverged = |field: String, recorded: f32, replayed: f32| Divergence {
            step: i as u64,
            field,
            recorded,
            replayed,
        };
        let mut div = None;
        if rec.time_step as usize != i {
            div = Some(diverged("time_step".into(), rec.time_step as f32, i as f32));
        }
        let q = quantize_qpos(&state.qpos);
        if div.is_none() {
            div = (0..QPOS_LEN)
                .find(|&j| q[j].to_bits() != rec.qpos[j].to_bits())
                .map(|j| diverged(format!("qpos[{j}]"), rec.qpos[j], q[j]));
        }
        if div.is_none() {
            for (k, obj) in state.objects.iter().enumerate() {
                let p = pose_to_f32(&obj.pose);
                let stored = rec.object_poses.get(k).copied().unwrap_or([f32::NAN; 7]);
                if let Some(j) = (0..7).find(|&j| p[j].to_bits() != stored[j].to_bits()) {
                    let name = names.get(k).cloned().unwrap_or_else(|| format!("#{k}"));
                    div = Some(diverged(format!("{name}.pose[{j}]"), stored[j], p[j]));
                    break;
                }
            }
        }
        if div.is_none() && opts.check_frames {
            let frames = observe_frames(&sim, &cameras, set, &state, &scene_opts);
            'cams: for ((id, fresh), stored) in set.ids().into_iter().zip(&frames).zip(&rec.frames) {
                if let Some(px) = (0..fresh.len()).find(|&k| stored.get(k) != Some(&fresh[k])) {
                    let recorded = stored.get(px).map_or(f32::NAN, |&v| v as f32);
                    div = Some(diverged(format!("frame[{id}][{px}]"), recorded, fresh[px] as f32));
                    break 'cams;
                }
            }
        }
        report.steps_checked = i as u64 + 1;
        if div.is_some() {
            report.first_divergence = div;
            break;
        }
        sim.step(&mut state, &widen_qpos(&rec.action));
    }
    report.final_stage_flags = state.stage_flags();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub file: String,
    pub seed: u64,
    pub step_count: u64,
    pub stage_flags: Vec<bool>,
    pub attempts: u32,
    pub bytes: u64,
    pub crc32: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub task: String,
    pub stages: Vec<String>,
    pub camera_set: CameraSet,
    pub noise_std: [f64; 2],
    pub episode_count: usize,
    /// Episodes that reached each stage.
    pub stage_counts: Vec<usize>,
    pub episodes: Vec<EpisodeSummary>,
}

pub const SUMMARY_FILE: &str = "summary.json";

pub fn episode_file_name(index: usize) -> String {
    format!("episode_{index:04}.trep")
}

impl DatasetSummary {
    pub fn load(dir: &Path) -> Result<Self, EpisodeError> {
        let text = std::fs::read_to_string(dir.join(SUMMARY_FILE))?;
        serde_json::from_str(&text).map_err(|e| EpisodeError::Manifest(format!("summary.json: {e}")))
    }

    pub fn save(&self, dir: &Path) -> Result<(), EpisodeError> {
        let mut text = serde_json::to_string_pretty(self).expect("summary serializes");
        text.push('\n');
        std::fs::write(dir.join(SUMMARY_FILE), text)?;
        Ok(())
    }

    pub fn episode_paths(&self, dir: &Path) -> Vec<PathBuf> {
        self.episodes.iter().map(|e| dir.join(&e.file)).collect()
    }
}

/// Loads every episode listed in a dataset directory's summary, in order.
pub fn load_dataset(dir: &Path) -> Result<(DatasetSummary, Vec<Episode>), EpisodeError> {
    let summary = DatasetSummary::load(dir)?;
    let episodes = summary
        .episode_paths(dir)
        .iter()
        .map(|p| Episode::load(p))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((summary, episodes))
}

#[cfg(test)]
mod tests;
