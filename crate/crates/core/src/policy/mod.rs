//! Chunked-action policies, the temporal-ensemble executor and the rollout
//! evaluation harness.

mod ensemble;
mod eval;
mod nn;

pub use ensemble::{ensemble_action, ensemble_weights, execute_with_ensemble, EnsembleConfig, Rollout};
pub use eval::{evaluate, evaluate_best, EvalConfig, SuccessRow, SuccessTable, EVAL_SEED_BASE};
pub use nn::{neighbor_ablation, observation_from_record, NnPolicy, ProbeReport, FRAME_GRID};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::CameraSet;
use crate::operator::{demonstrate, NoiseStd, OperatorConfig};
use crate::rig::{Qpos, QPOS_LEN};
use crate::sim::Simulator;

pub const DEFAULT_CHUNK: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub time_step: u64,
    pub qpos: [f32; QPOS_LEN],
    /// One frame per camera of the policy's camera set, canonical order.
    pub frames: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    pub actions: Vec<Qpos>,
}

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("camera set mismatch: dataset lacks {0}")]
    CameraSetMismatch(String),
    #[error("no training data")]
    Empty,
    #[error("episodes disagree on {0}")]
    Inconsistent(String),
    #[error("policy failed: {0}")]
    Failed(String),
}

/// A trained, immutable policy. [`Policy::start`] opens one episode.
pub trait Policy: Sync {
    fn name(&self) -> String;
    /// Cameras the policy reads; observations carry exactly these frames.
    fn camera_set(&self) -> CameraSet;
    fn start<'a>(&'a self, sim: &Simulator, seed: u64) -> Result<Box<dyn PolicyRun + 'a>, PolicyError>;
}

/// A policy bound to one episode.
pub trait PolicyRun {
    fn act(&mut self, obs: &Observation) -> Result<ActionChunk, PolicyError>;
}

/// `actions[t..t + len]`, holding the last action past the end.
pub fn chunk_from(actions: &[Qpos], t: usize, len: usize) -> ActionChunk {
    let last = actions.len().saturating_sub(1);
    ActionChunk {
        actions: (t..t + len).map(|i| actions[i.min(last)]).collect(),
    }
}

/// Replays the noiseless scripted demonstration for the rollout seed.
#[derive(Debug, Clone)]
pub struct OraclePolicy {
    pub operator: OperatorConfig,
    pub chunk_size: usize,
}

impl Default for OraclePolicy {
    fn default() -> Self {
        Self {
            operator: OperatorConfig {
                noise: NoiseStd::ZERO,
                ..OperatorConfig::default()
            },
            chunk_size: DEFAULT_CHUNK,
        }
    }
}

struct OracleRun {
    actions: Vec<Qpos>,
    chunk: usize,
}

impl PolicyRun for OracleRun {
    fn act(&mut self, obs: &Observation) -> Result<ActionChunk, PolicyError> {
        Ok(chunk_from(&self.actions, obs.time_step as usize, self.chunk))
    }
}

impl Policy for OraclePolicy {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn camera_set(&self) -> CameraSet {
        CameraSet::empty()
    }

    fn start<'a>(&'a self, sim: &Simulator, seed: u64) -> Result<Box<dyn PolicyRun + 'a>, PolicyError> {
        let demo = demonstrate(sim, seed, &self.operator).map_err(|e| PolicyError::Failed(e.to_string()))?;
        if demo.actions.is_empty() {
            return Err(PolicyError::Failed("empty demonstration".into()));
        }
        Ok(Box::new(OracleRun {
            actions: demo.actions,
            chunk: self.chunk_size,
        }))
    }
}

/// Uniform random joint targets, a fresh chunk per query.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    pub chunk_size: usize,
}

impl Default for RandomPolicy {
    fn default() -> Self {
        Self {
            chunk_size: DEFAULT_CHUNK,
        }
    }
}

struct RandomRun {
    rng: ChaCha8Rng,
    limits: [(f64, f64); QPOS_LEN],
    chunk: usize,
}

impl PolicyRun for RandomRun {
    fn act(&mut self, _obs: &Observation) -> Result<ActionChunk, PolicyError> {
        let actions = (0..self.chunk)
            .map(|_| std::array::from_fn(|i| self.rng.random_range(self.limits[i].0..=self.limits[i].1)))
            .collect();
        Ok(ActionChunk { actions })
    }
}

impl Policy for RandomPolicy {
    fn name(&self) -> String {
        "random".into()
    }

    fn camera_set(&self) -> CameraSet {
        CameraSet::empty()
    }

    fn start<'a>(&'a self, sim: &Simulator, seed: u64) -> Result<Box<dyn PolicyRun + 'a>, PolicyError> {
        Ok(Box::new(RandomRun {
            rng: ChaCha8Rng::seed_from_u64(seed),
            limits: sim.rig.qpos_limits(),
            chunk: self.chunk_size,
        }))
    }
}
