use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{execute_with_ensemble, EnsembleConfig, Observation, Policy};
use crate::camera::{CameraRig, SceneOptions};
use crate::episode::{observe_frames, quantize_qpos};
use crate::sim::Simulator;

/// Rollout `i` uses seed `EVAL_SEED_BASE + i`, disjoint from dataset seeds.
pub const EVAL_SEED_BASE: u64 = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub rollouts: usize,
    pub seed_base: u64,
    pub ensemble: EnsembleConfig,
    pub cameras: CameraRig,
    pub scene: SceneOptions,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rollouts: 50,
            seed_base: EVAL_SEED_BASE,
            ensemble: EnsembleConfig::default(),
            cameras: CameraRig::nominal(),
            scene: SceneOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessRow {
    pub configuration: String,
    pub policy: String,
    pub rollouts: usize,
    /// Rollouts that latched each stage.
    pub counts: Vec<usize>,
    pub percent: Vec<f64>,
    pub aborted: usize,
}

impl SuccessRow {
    fn better_than(&self, other: &SuccessRow) -> bool {
        let key = |r: &SuccessRow| r.counts.iter().rev().copied().collect::<Vec<_>>();
        key(self) > key(other)
    }
}

/// Per-stage success over `cfg.rollouts` fresh seeds.
pub fn evaluate(policy: &dyn Policy, sim: &Simulator, configuration: &str, cfg: &EvalConfig) -> SuccessRow {
    let set = policy.camera_set();
    let horizon = sim.task.config.horizon;
    let results: Vec<(Vec<bool>, bool)> = (0..cfg.rollouts)
        .into_par_iter()
        .map(|i| {
            let seed = cfg.seed_base + i as u64;
            let stages = sim.task.stages.len();
            let Ok(mut run) = policy.start(sim, seed) else {
                return (vec![false; stages], true);
            };
            let state = sim.reset(seed);
            let rollout = execute_with_ensemble(run.as_mut(), sim, state, horizon, &cfg.ensemble, |s| Observation {
                time_step: s.time_step,
                qpos: quantize_qpos(&s.qpos),
                frames: observe_frames(sim, &cfg.cameras, &set, s, &cfg.scene),
            });
            (rollout.stage_flags, rollout.aborted.is_some())
        })
        .collect();
    let stages = sim.task.stages.len();
    let counts: Vec<usize> = (0..stages).map(|k| results.iter().filter(|(f, _)| f[k]).count()).collect();
    let n = cfg.rollouts.max(1) as f64;
    SuccessRow {
        configuration: configuration.to_string(),
        policy: policy.name(),
        rollouts: cfg.rollouts,
        percent: counts.iter().map(|c| 100.0 * *c as f64 / n).collect(),
        counts,
        aborted: results.iter().filter(|(_, a)| *a).count(),
    }
}

/// Evaluates every variant and keeps the best row (final stage first, then
/// earlier stages; the first variant wins ties).
pub fn evaluate_best(variants: &[&dyn Policy], sim: &Simulator, configuration: &str, cfg: &EvalConfig) -> Option<SuccessRow> {
    let mut best: Option<SuccessRow> = None;
    for p in variants {
        let row = evaluate(*p, sim, configuration, cfg);
        if best.as_ref().is_none_or(|b| row.better_than(b)) {
            best = Some(row);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessTable {
    pub task: String,
    pub stages: Vec<String>,
    pub rows: Vec<SuccessRow>,
}

impl SuccessTable {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("table serializes");
        s.push('\n');
        s
    }

    /// Aligned text, one line per configuration: `AV | Grasp 98 | Thread 52`.
    pub fn to_text(&self) -> String {
        let label_w = self.rows.iter().map(|r| r.configuration.len()).max().unwrap_or(0).max("Cameras".len());
        let mut out = format!("{:<label_w$}", "Cameras");
        for s in &self.stages {
            out.push_str(&format!(" | {s} {:>3}", "%"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{:<label_w$}", r.configuration));
            for (s, p) in self.stages.iter().zip(&r.percent) {
                out.push_str(&format!(" | {s} {:>3}", p.round() as i64));
            }
            out.push('\n');
        }
        out
    }
}
