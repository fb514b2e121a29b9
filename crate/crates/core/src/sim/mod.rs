//! Deterministic 2-D tabletop with four manipulation tasks.
//!
//! The end effector lives in the unit square and is driven by absolute pose
//! targets `(x, y, θ, gripper)`. Each step moves it at most `v_max` toward
//! the target along a straight line, turns it at most [`OMEGA_MAX`], and
//! binarizes the gripper at 0 (open = +1, closed = −1). Task conditions are
//! evaluated after the move and latch once met.

mod arm;
mod expert;
mod raster;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoaError, Result};

pub use arm::{jacobian_2link, pd_control, ArmModel, ArmSim, DAMPING_LAMBDA, SINGULAR_DET};
pub use expert::{scripted_expert, trapezoid_segment};
pub use raster::{render, RASTER_SIZE};

pub const V_MAX: f64 = 0.05;
pub const OMEGA_MAX: f64 = 0.2;
pub const T_MAX: usize = 60;
pub const GRIPPER_OPEN: f64 = 1.0;
pub const GRIPPER_CLOSED: f64 = -1.0;
/// Planar action: x, y, θ, gripper.
pub const PLANAR_ACTION_DIM: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    ReachTarget,
    PushButton,
    PickPlace,
    SlideBlock,
}

impl TaskId {
    pub const ALL: [TaskId; 4] = [
        TaskId::ReachTarget,
        TaskId::PushButton,
        TaskId::PickPlace,
        TaskId::SlideBlock,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::ReachTarget => "reach_target",
            TaskId::PushButton => "push_button",
            TaskId::PickPlace => "pick_place",
            TaskId::SlideBlock => "slide_block",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Nominal object positions; the first object is the one whose spread
    /// defines interpolation/extrapolation splits.
    pub fn nominal_objects(self) -> Vec<[f64; 2]> {
        match self {
            TaskId::ReachTarget => vec![[0.5, 0.65]],
            TaskId::PushButton => vec![[0.6, 0.6]],
            TaskId::PickPlace => vec![[0.35, 0.45], [0.65, 0.55]],
            TaskId::SlideBlock => vec![[0.4, 0.4], [0.6, 0.65]],
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = CoaError;

    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| CoaError::Config(format!("unknown task `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task: TaskId,
    /// Nominal object positions in workspace units.
    pub nominal: Vec<[f64; 2]>,
    /// Per-axis standard deviation of object placement.
    pub spread: f64,
    /// Success tolerance δ.
    pub tolerance: f64,
    pub max_steps: usize,
    pub ee_home: [f64; 3],
    pub v_max: f64,
}

impl TaskSpec {
    pub fn new(task: TaskId) -> Self {
        Self {
            task,
            nominal: task.nominal_objects(),
            spread: 0.1,
            tolerance: 0.03,
            max_steps: T_MAX,
            ee_home: [0.5, 0.2, 0.0],
            v_max: V_MAX,
        }
    }

    pub fn with_spread(mut self, spread: f64) -> Self {
        self.spread = spread;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CoaError::Config(format!("task spec: {m}")));
        if self.nominal.len() != self.task.nominal_objects().len() {
            return err(format!(
                "{} expects {} objects, found {}",
                self.task,
                self.task.nominal_objects().len(),
                self.nominal.len()
            ));
        }
        if !(self.spread >= 0.0 && self.spread.is_finite()) {
            return err(format!("spread must be >= 0, found {}", self.spread));
        }
        if !(self.tolerance > 0.0) {
            return err(format!("tolerance must be > 0, found {}", self.tolerance));
        }
        if self.max_steps < 2 {
            return err(format!("max_steps must be >= 2, found {}", self.max_steps));
        }
        if !(self.v_max > 0.0) {
            return err(format!("v_max must be > 0, found {}", self.v_max));
        }
        let inside = |p: &[f64]| p.iter().all(|v| (0.0..=1.0).contains(v));
        if !self.nominal.iter().all(|p| inside(p)) || !inside(&self.ee_home[..2]) {
            return err("positions must lie in the unit workspace".into());
        }
        Ok(())
    }

    pub fn n_objects(&self) -> usize {
        self.nominal.len()
    }

    /// `[EE pose (3), gripper (1), objects (2 each), task one-hot (4)]`.
    pub fn obs_dim(&self) -> usize {
        4 + 2 * self.n_objects() + TaskId::ALL.len()
    }

    /// Sizes of the semantic groups that make up an observation vector.
    pub fn obs_groups(&self) -> Vec<usize> {
        let mut g = vec![3, 1];
        g.extend(std::iter::repeat_n(2, self.n_objects()));
        g.push(TaskId::ALL.len());
        g
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub ee: [f64; 3],
    pub gripper: f64,
    pub objects: Vec<[f64; 2]>,
    pub pressed: bool,
    pub holding: bool,
    pub success: bool,
    pub step: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub done: bool,
    pub success: bool,
}

/// A task instance: spec plus mutable world state.
#[derive(Clone, Debug)]
pub struct Env {
    spec: TaskSpec,
    state: WorldState,
}

fn clip01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Placement RNG for `(task, seed)`.
fn placement_rng(task: TaskId, seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(coa_autodiff::rng::derive_key(&[0x5e11, task.index() as u64, seed]))
}

/// Object positions drawn for `(spec, seed)`: nominal + N(0, σ²) per axis,
/// clipped to the workspace.
pub fn sample_objects(spec: &TaskSpec, seed: u64) -> Vec<[f64; 2]> {
    if spec.spread == 0.0 {
        return spec.nominal.clone();
    }
    let mut rng = placement_rng(spec.task, seed);
    let normal = Normal::new(0.0, spec.spread).expect("spread validated");
    spec.nominal
        .iter()
        .map(|p| {
            let dx = normal.sample(&mut rng);
            let dy = normal.sample(&mut rng);
            [clip01(p[0] + dx), clip01(p[1] + dy)]
        })
        .collect()
}

impl Env {
    pub fn reset(spec: &TaskSpec, seed: u64) -> Result<(Env, Vec<f64>)> {
        spec.validate()?;
        let state = WorldState {
            ee: spec.ee_home,
            gripper: GRIPPER_OPEN,
            objects: sample_objects(spec, seed),
            pressed: false,
            holding: false,
            success: false,
            step: 0,
            seed,
        };
        let env = Env {
            spec: spec.clone(),
            state,
        };
        let obs = env.observe();
        Ok((env, obs))
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    /// Replaces the world state (used by tests to stage configurations).
    pub fn set_state(&mut self, state: WorldState) {
        self.state = state;
    }

    pub fn observe(&self) -> Vec<f64> {
        let s = &self.state;
        let mut obs = Vec::with_capacity(self.spec.obs_dim());
        obs.extend_from_slice(&s.ee);
        obs.push(s.gripper);
        for o in &s.objects {
            obs.extend_from_slice(o);
        }
        let mut onehot = [0.0; 4];
        onehot[self.spec.task.index()] = 1.0;
        obs.extend_from_slice(&onehot);
        obs
    }

    pub fn done(&self) -> bool {
        self.state.success || self.state.step >= self.spec.max_steps
    }

    /// Applies one planar action `(x, y, θ, gripper)`.
    ///
    /// Stepping past `done` keeps integrating the world (scripted experts
    /// finish their plan after the success condition first holds) but never
    /// advances the step counter beyond `max_steps`.
    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if action.len() != PLANAR_ACTION_DIM {
            return Err(CoaError::InvalidAction(format!(
                "expected {PLANAR_ACTION_DIM} values, found {}",
                action.len()
            )));
        }
        if action.iter().any(|v| !v.is_finite()) {
            return Err(CoaError::InvalidAction(format!("non-finite action {action:?}")));
        }
        let spec = &self.spec;
        let s = &mut self.state;
        let prev_ee = [s.ee[0], s.ee[1]];
        let target = [clip01(action[0]), clip01(action[1])];
        let d = [target[0] - s.ee[0], target[1] - s.ee[1]];
        let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
        if n > spec.v_max {
            s.ee[0] += d[0] / n * spec.v_max;
            s.ee[1] += d[1] / n * spec.v_max;
        } else {
            s.ee[0] = target[0];
            s.ee[1] = target[1];
        }
        let dtheta = (action[2] - s.ee[2]).clamp(-OMEGA_MAX, OMEGA_MAX);
        s.ee[2] += dtheta;

        let was_open = s.gripper > 0.0;
        s.gripper = if action[3] >= 0.0 { GRIPPER_OPEN } else { GRIPPER_CLOSED };
        let closed = s.gripper < 0.0;
        let ee = [s.ee[0], s.ee[1]];
        let tol = spec.tolerance;

        match spec.task {
            TaskId::ReachTarget => {
                if dist(ee, s.objects[0]) <= tol {
                    s.success = true;
                }
            }
            TaskId::PushButton => {
                if closed && dist(ee, s.objects[0]) <= tol {
                    s.pressed = true;
                }
                if s.pressed {
                    s.success = true;
                }
            }
            TaskId::PickPlace => {
                if !closed {
                    s.holding = false;
                } else if was_open && dist(ee, s.objects[0]) <= tol {
                    s.holding = true;
                }
                if s.holding {
                    s.objects[0] = ee;
                }
                if dist(s.objects[0], s.objects[1]) <= tol {
                    s.success = true;
                }
            }
            TaskId::SlideBlock => {
                // closed fingers drag the block while in contact
                if closed && dist(prev_ee, s.objects[0]) <= tol {
                    s.objects[0][0] += ee[0] - prev_ee[0];
                    s.objects[0][1] += ee[1] - prev_ee[1];
                }
                if dist(s.objects[0], s.objects[1]) <= tol {
                    s.success = true;
                }
            }
        }
        if s.step < spec.max_steps {
            s.step += 1;
        }
        let success = s.success;
        Ok(StepOutcome {
            observation: self.observe(),
            done: self.done(),
            success,
        })
    }
}
