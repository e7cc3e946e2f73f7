//! Kinematic world stepped at 50 Hz.
//!
//! Joints slew toward their targets under a per-joint rate limit. Objects have
//! no dynamics: a closing gripper near a grasp site attaches the object with
//! its current offset, an opening gripper releases it in place. Task stages
//! are geometric predicates latched in order.

mod scene;
mod task;

pub use scene::{insertion_geometry, Attachment, InsertionGeometry, SceneObject, Shape, Socket};
pub use task::{Predicate, Region, Stage, TaskConfig, TaskId, TaskSpec};

use serde::{Deserialize, Serialize};

use crate::pose::Pose;
use crate::rig::{ChainId, Qpos, Rig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    /// Per-joint speed limit (rad/s), grippers included.
    pub v_max: f64,
    pub grasp_radius: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.02,
            v_max: 2.0,
            grasp_radius: 0.02,
        }
    }
}

impl SimConfig {
    pub fn max_joint_step(&self) -> f64 {
        self.v_max * self.dt
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub time_step: u64,
    #[serde(with = "qpos_serde")]
    pub qpos: Qpos,
    pub objects: Vec<SceneObject>,
    /// Step at which each stage latched.
    pub stage_latched_at: Vec<Option<u64>>,
}

mod qpos_serde {
    use crate::rig::{Qpos, QPOS_LEN};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(q: &Qpos, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(q.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Qpos, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        v.try_into()
            .map_err(|v: Vec<f64>| serde::de::Error::invalid_length(v.len(), &QPOS_LEN.to_string().as_str()))
    }
}

impl SimState {
    pub fn stage_flags(&self) -> Vec<bool> {
        self.stage_latched_at.iter().map(Option::is_some).collect()
    }

    pub fn object(&self, name: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.name == name)
    }

    pub fn object_poses(&self) -> Vec<Pose> {
        self.objects.iter().map(|o| o.pose).collect()
    }

    pub fn all_stages_done(&self) -> bool {
        self.stage_latched_at.iter().all(Option::is_some)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GraspEvent {
    Attached { chain: ChainId, object: usize },
    CoHeld { chain: ChainId, object: usize },
    Transferred { from: ChainId, to: ChainId, object: usize },
    Released { chain: ChainId, object: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTelemetry {
    /// Targets that were outside their limits.
    pub clamped_targets: usize,
    /// Joints whose motion was cut by the rate limit.
    pub rate_limited: usize,
    pub grasp_events: Vec<GraspEvent>,
}

/// A rig plus a task; owns no state so it can be shared across rollouts.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub rig: Rig,
    pub task: TaskSpec,
    pub config: SimConfig,
}

impl Simulator {
    pub fn new(rig: Rig, task: TaskSpec, config: SimConfig) -> Self {
        Self { rig, task, config }
    }

    pub fn nominal(task: TaskId) -> Self {
        Self::new(Rig::nominal(), TaskSpec::for_task(task), SimConfig::default())
    }

    pub fn reset(&self, seed: u64) -> SimState {
        SimState {
            time_step: 0,
            qpos: self.rig.start,
            objects: self.task.sample_scene(seed),
            stage_latched_at: vec![None; self.task.stages.len()],
        }
    }

    pub fn tool_poses(&self, qpos: &Qpos) -> [Pose; 3] {
        ChainId::ALL.map(|id| self.rig.tool_pose(id, qpos))
    }

    pub fn step(&self, state: &mut SimState, targets: &Qpos) -> StepTelemetry {
        let mut tel = StepTelemetry::default();
        let mut goal = *targets;
        tel.clamped_targets = self.rig.clamp_qpos(&mut goal);

        let prev = state.qpos;
        let max_step = self.config.max_joint_step();
        for (q, g) in state.qpos.iter_mut().zip(goal.iter()) {
            let delta = g - *q;
            if delta.abs() > max_step {
                *q += max_step.copysign(delta);
                tel.rate_limited += 1;
            } else {
                *q = *g;
            }
        }

        let tools = self.tool_poses(&state.qpos);
        let tool = |c: ChainId| tools[c as usize];
        for obj in &mut state.objects {
            if let Some(a) = obj.attached_to {
                obj.pose = tool(a.chain).compose(&a.offset);
            }
        }

        let gripper = self.rig.gripper;
        for chain in [ChainId::Left, ChainId::Right] {
            let g = chain.gripper_index().expect("manipulators have grippers");
            let (was, now) = (gripper.is_closed(prev[g]), gripper.is_closed(state.qpos[g]));
            if was && !now {
                self.release(state, chain, &tools, &mut tel);
            } else if !was && now {
                self.grasp(state, chain, &tool(chain), &mut tel);
            }
        }

        for k in 0..state.stage_latched_at.len() {
            if state.stage_latched_at[k].is_some() {
                continue;
            }
            let prior_ok = k == 0
                || state.stage_latched_at[k - 1].is_some_and(|t| t < state.time_step);
            if prior_ok && self.task.evaluate(k, &state.objects) {
                state.stage_latched_at[k] = Some(state.time_step);
            }
        }

        state.time_step += 1;
        tel
    }

    fn release(&self, state: &mut SimState, chain: ChainId, tools: &[Pose; 3], tel: &mut StepTelemetry) {
        for (idx, obj) in state.objects.iter_mut().enumerate() {
            obj.co_holders.retain(|a| a.chain != chain);
            if obj.attached_to.is_some_and(|a| a.chain == chain) {
                if obj.co_holders.is_empty() {
                    obj.attached_to = None;
                    tel.grasp_events.push(GraspEvent::Released { chain, object: idx });
                } else {
                    let next = obj.co_holders.remove(0);
                    let offset = tools[next.chain as usize].inverse().compose(&obj.pose);
                    obj.attached_to = Some(Attachment {
                        chain: next.chain,
                        offset,
                    });
                    tel.grasp_events.push(GraspEvent::Transferred {
                        from: chain,
                        to: next.chain,
                        object: idx,
                    });
                }
            }
        }
    }

    fn grasp(&self, state: &mut SimState, chain: ChainId, tool: &Pose, tel: &mut StepTelemetry) {
        let point = tool.translation();
        let best = state
            .objects
            .iter()
            .enumerate()
            .filter(|(_, o)| o.graspable && !o.is_held_by(chain))
            .filter_map(|(i, o)| o.nearest_site(point).map(|(_, d)| (i, d)))
            .filter(|(_, d)| *d <= self.config.grasp_radius)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        let Some((idx, _)) = best else { return };
        let obj = &mut state.objects[idx];
        let attachment = Attachment {
            chain,
            offset: tool.inverse().compose(&obj.pose),
        };
        if obj.attached_to.is_none() {
            obj.attached_to = Some(attachment);
            tel.grasp_events.push(GraspEvent::Attached { chain, object: idx });
        } else {
            obj.co_holders.push(attachment);
            tel.grasp_events.push(GraspEvent::CoHeld { chain, object: idx });
        }
    }

    pub fn stage_status(&self, state: &SimState) -> Vec<bool> {
        state.stage_flags()
    }
}
