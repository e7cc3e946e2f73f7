use serde::{Deserialize, Serialize};

use super::{ActionChunk, Observation, PolicyRun};
use crate::rig::{Qpos, QPOS_LEN};
use crate::sim::{SimState, Simulator};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub chunk_size: usize,
    pub query_period: usize,
    /// Decay `m` in `exp(-m·i)`.
    pub decay: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            chunk_size: super::DEFAULT_CHUNK,
            query_period: 25,
            decay: 0.1,
        }
    }
}

impl EnsembleConfig {
    /// One chunk at a time, executed verbatim.
    pub fn off(chunk_size: usize) -> Self {
        Self {
            chunk_size,
            query_period: chunk_size,
            decay: 0.0,
        }
    }
}

/// Normalized weights for `n` live chunks, index 0 being the oldest.
pub fn ensemble_weights(n: usize, decay: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|i| (-decay * i as f64).exp()).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / sum).collect()
}

/// Weighted average of the live predictions for one step, oldest first.
/// Written as offsets from the oldest prediction so agreeing chunks give it
/// back bit for bit.
pub fn ensemble_action(predictions: &[Qpos], decay: f64) -> Qpos {
    let base = predictions[0];
    let w = ensemble_weights(predictions.len(), decay);
    std::array::from_fn(|j| {
        let mut v = base[j];
        for (p, wi) in predictions.iter().zip(&w).skip(1) {
            v += wi * (p[j] - base[j]);
        }
        v
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub actions: Vec<Qpos>,
    pub stage_flags: Vec<bool>,
    /// Set when the policy failed; the rollout then counts as a failure.
    pub aborted: Option<String>,
    pub queries: usize,
}

/// Runs a policy from `state` to `horizon`, querying every `query_period`
/// steps and averaging all live chunks. `observe` is called only at query
/// steps.
pub fn execute_with_ensemble(
    run: &mut dyn PolicyRun,
    sim: &Simulator,
    mut state: SimState,
    horizon: u64,
    cfg: &EnsembleConfig,
    mut observe: impl FnMut(&SimState) -> Observation,
) -> Rollout {
    let period = cfg.query_period.max(1) as u64;
    let mut live: Vec<(u64, ActionChunk)> = Vec::new();
    let mut out = Rollout {
        actions: Vec::new(),
        stage_flags: Vec::new(),
        aborted: None,
        queries: 0,
    };
    let limits = sim.rig.qpos_limits();
    while state.time_step < horizon {
        let t = state.time_step;
        if t % period == 0 {
            let obs = observe(&state);
            match run.act(&obs) {
                Ok(chunk) if chunk.actions.len() == cfg.chunk_size => live.push((t, chunk)),
                Ok(chunk) => {
                    out.aborted = Some(format!("chunk of {} actions, expected {}", chunk.actions.len(), cfg.chunk_size));
                    break;
                }
                Err(e) => {
                    out.aborted = Some(e.to_string());
                    break;
                }
            }
            out.queries += 1;
        }
        live.retain(|(t0, c)| t < t0 + c.actions.len() as u64);
        let preds: Vec<Qpos> = live.iter().map(|(t0, c)| c.actions[(t - t0) as usize]).collect();
        let mut action = ensemble_action(&preds, cfg.decay);
        for j in 0..QPOS_LEN {
            action[j] = action[j].clamp(limits[j].0, limits[j].1);
        }
        out.actions.push(action);
        sim.step(&mut state, &action);
    }
    out.stage_flags = if out.aborted.is_some() {
        vec![false; state.stage_latched_at.len()]
    } else {
        state.stage_flags()
    };
    out
}
