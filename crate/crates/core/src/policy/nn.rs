use super::{chunk_from, ActionChunk, Observation, Policy, PolicyError, PolicyRun};
use crate::camera::CameraSet;
use crate::episode::{widen_qpos, Episode};
use crate::rig::{Qpos, QPOS_LEN};
use crate::sim::Simulator;

/// Frames enter the key as `FRAME_GRID × FRAME_GRID` block averages.
pub const FRAME_GRID: usize = 8;

/// Block-averages a row-major image down to `FRAME_GRID²` values.
fn downsample(pixels: &[u8], width: usize, height: usize, out: &mut Vec<f32>) {
    for by in 0..FRAME_GRID {
        let (y0, y1) = (by * height / FRAME_GRID, (by + 1) * height / FRAME_GRID);
        for bx in 0..FRAME_GRID {
            let (x0, x1) = (bx * width / FRAME_GRID, (bx + 1) * width / FRAME_GRID);
            let mut sum = 0u32;
            for y in y0..y1 {
                sum += pixels[y * width + x0..y * width + x1].iter().map(|&p| p as u32).sum::<u32>();
            }
            let n = ((y1 - y0) * (x1 - x0)).max(1);
            out.push(sum as f32 / n as f32);
        }
    }
}

fn raw_key(obs: &Observation, width: usize, height: usize) -> Vec<f32> {
    let mut key = Vec::with_capacity(QPOS_LEN + obs.frames.len() * FRAME_GRID * FRAME_GRID);
    key.extend_from_slice(&obs.qpos);
    for f in &obs.frames {
        downsample(f, width, height, &mut key);
    }
    key
}

/// Observation at `step` of a recorded episode, restricted to `set`.
pub fn observation_from_record(ep: &Episode, step: usize, set: &CameraSet) -> Result<Observation, PolicyError> {
    let rec = &ep.steps[step];
    let frames = set
        .ids()
        .into_iter()
        .map(|id| {
            ep.manifest
                .camera_set
                .position(id)
                .map(|i| rec.frames[i].clone())
                .ok_or_else(|| PolicyError::CameraSetMismatch(id.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Observation {
        time_step: rec.time_step as u64,
        qpos: rec.qpos,
        frames,
    })
}

/// Nearest-neighbor lookup from observation keys to the recorded next chunk.
#[derive(Debug, Clone)]
pub struct NnPolicy {
    camera_set: CameraSet,
    chunk_size: usize,
    width: usize,
    height: usize,
    dim: usize,
    mean: Vec<f32>,
    inv_std: Vec<f32>,
    /// Normalized keys, row-major, in (episode, step) order.
    keys: Vec<f32>,
    index: Vec<(u32, u32)>,
    actions: Vec<Vec<Qpos>>,
}

impl NnPolicy {
    pub fn train(episodes: &[Episode], set: &CameraSet, chunk_size: usize) -> Result<Self, PolicyError> {
        let first = episodes.first().ok_or(PolicyError::Empty)?;
        for ep in episodes {
            if !set.is_subset(&ep.manifest.camera_set) {
                let missing: Vec<String> =
                    set.missing_from(&ep.manifest.camera_set).iter().map(|c| c.to_string()).collect();
                return Err(PolicyError::CameraSetMismatch(missing.join(",")));
            }
            if ep.manifest.intrinsics != first.manifest.intrinsics {
                return Err(PolicyError::Inconsistent("intrinsics".into()));
            }
        }
        let (width, height) = (first.manifest.intrinsics.width as usize, first.manifest.intrinsics.height as usize);
        let mut keys = Vec::new();
        let mut index = Vec::new();
        let mut actions = Vec::with_capacity(episodes.len());
        let mut dim = 0;
        for (e, ep) in episodes.iter().enumerate() {
            for t in 0..ep.steps.len() {
                let k = raw_key(&observation_from_record(ep, t, set)?, width, height);
                dim = k.len();
                keys.extend(k);
                index.push((e as u32, t as u32));
            }
            actions.push(ep.steps.iter().map(|s| widen_qpos(&s.action)).collect());
        }
        if index.is_empty() {
            return Err(PolicyError::Empty);
        }
        let n = index.len();
        let mut mean = vec![0.0f64; dim];
        let mut var = vec![0.0f64; dim];
        for row in keys.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += *v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for row in keys.chunks_exact(dim) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (*v as f64 - m).powi(2);
            }
        }
        let mean: Vec<f32> = mean.into_iter().map(|m| m as f32).collect();
        let inv_std: Vec<f32> = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-9 {
                    (1.0 / sd) as f32
                } else {
                    1.0
                }
            })
            .collect();
        for row in keys.chunks_exact_mut(dim) {
            for ((v, m), is) in row.iter_mut().zip(&mean).zip(&inv_std) {
                *v = (*v - m) * is;
            }
        }
        Ok(Self {
            camera_set: set.clone(),
            chunk_size,
            width,
            height,
            dim,
            mean,
            inv_std,
            keys,
            index,
            actions,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn key_dim(&self) -> usize {
        self.dim
    }

    fn normalized_key(&self, obs: &Observation) -> Result<Vec<f32>, PolicyError> {
        if obs.frames.len() != self.camera_set.len() {
            return Err(PolicyError::CameraSetMismatch(format!(
                "observation has {} frames, policy reads {}",
                obs.frames.len(),
                self.camera_set.len()
            )));
        }
        let mut k = raw_key(obs, self.width, self.height);
        for ((v, m), is) in k.iter_mut().zip(&self.mean).zip(&self.inv_std) {
            *v = (*v - m) * is;
        }
        Ok(k)
    }

    /// `(episode, step, squared distance)` of the nearest stored key; ties go
    /// to the lowest episode, then the lowest step.
    pub fn nearest(&self, obs: &Observation) -> Result<(usize, usize, f32), PolicyError> {
        let q = self.normalized_key(obs)?;
        let mut best = (0usize, f32::INFINITY);
        for (i, row) in self.keys.chunks_exact(self.dim).enumerate() {
            let mut d = 0.0f32;
            for (a, b) in row.iter().zip(&q) {
                let x = a - b;
                d += x * x;
                if d >= best.1 {
                    break;
                }
            }
            if d < best.1 {
                best = (i, d);
            }
        }
        let (e, t) = self.index[best.0];
        Ok((e as usize, t as usize, best.1))
    }

    pub fn predict(&self, obs: &Observation) -> Result<ActionChunk, PolicyError> {
        let (e, t, _) = self.nearest(obs)?;
        Ok(chunk_from(&self.actions[e], t, self.chunk_size))
    }
}

struct NnRun<'a>(&'a NnPolicy);

impl PolicyRun for NnRun<'_> {
    fn act(&mut self, obs: &Observation) -> Result<ActionChunk, PolicyError> {
        self.0.predict(obs)
    }
}

impl Policy for NnPolicy {
    fn name(&self) -> String {
        format!("nn[{}]", self.camera_set.label())
    }

    fn camera_set(&self) -> CameraSet {
        self.camera_set.clone()
    }

    fn start<'a>(&'a self, _sim: &Simulator, _seed: u64) -> Result<Box<dyn PolicyRun + 'a>, PolicyError> {
        Ok(Box::new(NnRun(self)))
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProbeReport {
    pub with_cameras: CameraSet,
    pub without_cameras: CameraSet,
    pub queries: usize,
    /// Queries whose nearest neighbor changed when the cameras were dropped.
    pub differing: usize,
}

/// Trains on `train` with and without some cameras and counts how many of
/// `queries` (episode, step) pick a different neighbor.
pub fn neighbor_ablation(
    train: &[Episode],
    held_out: &[Episode],
    with: &CameraSet,
    without: &CameraSet,
    queries: usize,
    chunk_size: usize,
) -> Result<ProbeReport, PolicyError> {
    let a = NnPolicy::train(train, with, chunk_size)?;
    let b = NnPolicy::train(train, without, chunk_size)?;
    let total: usize = held_out.iter().map(|e| e.steps.len()).sum();
    if total == 0 {
        return Err(PolicyError::Empty);
    }
    let mut differing = 0;
    let mut n = 0;
    // Evenly spaced over the concatenated held-out steps.
    for q in 0..queries {
        let mut k = q * total / queries.max(1);
        let ep = held_out
            .iter()
            .find(|e| {
                if k < e.steps.len() {
                    true
                } else {
                    k -= e.steps.len();
                    false
                }
            })
            .expect("index within total");
        let na = a.nearest(&observation_from_record(ep, k, with)?)?;
        let nb = b.nearest(&observation_from_record(ep, k, without)?)?;
        if (na.0, na.1) != (nb.0, nb.1) {
            differing += 1;
        }
        n += 1;
    }
    Ok(ProbeReport {
        with_cameras: with.clone(),
        without_cameras: without.clone(),
        queries: n,
        differing,
    })
}
