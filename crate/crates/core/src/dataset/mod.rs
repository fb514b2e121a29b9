//! Demonstrations, their on-disk format, normalization, and the per-step
//! training targets for every decoding order.

mod chain;
mod io;
mod norm;
mod split;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoaError, Result};
use crate::sim::{scripted_expert, TaskId, TaskSpec, PLANAR_ACTION_DIM};

pub use chain::{
    build_chain_target, build_chain_target_with, extract_keyframe, keyframe_index, ChainTarget, KeyframeMode,
    Ordering, CHUNK_LEN,
};
pub use io::{read_dataset, write_dataset, DatasetManifest, FORMAT_VERSION};
pub use norm::NormStats;
pub use split::{bounding_box, spatial_variance, split_interp_extrap, BoundingBox, EvalCandidate, SpatialSplit};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoStep {
    pub obs: Vec<f64>,
    pub act: Vec<f64>,
}

/// One expert episode. `steps[k]` pairs the observation at time `k` with
/// the action executed next, so `steps[k].act` is `a_{k+1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    pub task: TaskId,
    pub seed: u64,
    pub steps: Vec<DemoStep>,
    pub success: bool,
    pub object_positions: Vec<[f64; 2]>,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn action(&self, k: usize) -> &[f64] {
        &self.steps[k].act
    }

    pub fn actions(&self) -> impl Iterator<Item = &[f64]> {
        self.steps.iter().map(|s| s.act.as_slice())
    }

    /// Position of the first object at reset (the split/variance subject).
    pub fn primary_position(&self) -> [f64; 2] {
        self.object_positions[0]
    }
}

/// Action vector layout.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionLayout {
    /// `x, y, θ, gripper`
    #[default]
    Planar4,
    /// `x, y, z, qx, qy, qz, qw, gripper` (yaw-only quaternion, z = 0)
    Pose8,
}

impl ActionLayout {
    pub fn dim(self) -> usize {
        match self {
            ActionLayout::Planar4 => 4,
            ActionLayout::Pose8 => 8,
        }
    }

    pub fn from_dim(dim: usize) -> Result<Self> {
        match dim {
            4 => Ok(ActionLayout::Planar4),
            8 => Ok(ActionLayout::Pose8),
            d => Err(CoaError::Dataset(format!("unsupported action dimension {d}"))),
        }
    }

    pub fn gripper_index(self) -> usize {
        self.dim() - 1
    }

    /// Index range of the quaternion sub-vector, if any.
    pub fn quaternion(self) -> Option<std::ops::Range<usize>> {
        match self {
            ActionLayout::Planar4 => None,
            ActionLayout::Pose8 => Some(3..7),
        }
    }

    pub fn from_planar(self, a: &[f64]) -> Vec<f64> {
        match self {
            ActionLayout::Planar4 => a.to_vec(),
            ActionLayout::Pose8 => {
                let half = a[2] / 2.0;
                vec![a[0], a[1], 0.0, 0.0, 0.0, half.sin(), half.cos(), a[3]]
            }
        }
    }

    pub fn to_planar(self, a: &[f64]) -> Vec<f64> {
        match self {
            ActionLayout::Planar4 => a.to_vec(),
            ActionLayout::Pose8 => {
                let yaw = 2.0 * a[5].atan2(a[6]);
                vec![a[0], a[1], yaw, a[7]]
            }
        }
    }
}

/// Rescales a quaternion sub-vector to unit norm in place.
pub fn renormalize_quaternion(q: &mut [f64]) {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        q.iter_mut().for_each(|v| *v /= n);
    } else {
        q.iter_mut().for_each(|v| *v = 0.0);
        if let Some(w) = q.last_mut() {
            *w = 1.0;
        }
    }
}

fn convert_layout(mut demo: Demonstration, layout: ActionLayout) -> Demonstration {
    if layout != ActionLayout::Planar4 {
        for s in &mut demo.steps {
            debug_assert_eq!(s.act.len(), PLANAR_ACTION_DIM);
            s.act = layout.from_planar(&s.act);
        }
    }
    demo
}

/// `n` successful expert demonstrations on consecutive seeds from `seed0`.
///
/// Seeds whose expert fails are skipped (and logged). Collection aborts once
/// more than 10% of attempted seeds have failed.
pub fn collect_demos(spec: &TaskSpec, n: usize, seed0: u64, layout: ActionLayout) -> Result<Vec<Demonstration>> {
    if n == 0 {
        return Err(CoaError::Dataset("n must be >= 1".into()));
    }
    spec.validate()?;
    let mut demos = Vec::with_capacity(n);
    let mut next = seed0;
    let mut attempts = 0usize;
    let mut failures = 0usize;
    while demos.len() < n {
        let want = n - demos.len();
        let seeds: Vec<u64> = (next..next + want as u64).collect();
        next += want as u64;
        let results: Vec<_> = seeds.par_iter().map(|&s| (s, scripted_expert(spec, s))).collect();
        for (seed, r) in results {
            attempts += 1;
            match r {
                Ok(d) => demos.push(convert_layout(d, layout)),
                Err(e) => {
                    failures += 1;
                    log::warn!("skipping seed {seed}: {e}");
                }
            }
        }
        if failures * 10 > attempts {
            return Err(CoaError::Dataset(format!(
                "expert failure rate too high for {}: {failures} of {attempts} seeds failed",
                spec.task
            )));
        }
    }
    Ok(demos)
}

/// Demonstrations plus the collection-level manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub demos: Vec<Demonstration>,
}

impl Dataset {
    /// Builds a dataset whose normalization statistics come from `demos`.
    pub fn from_demos(task: TaskId, demos: Vec<Demonstration>) -> Result<Self> {
        let first = demos
            .first()
            .ok_or_else(|| CoaError::Dataset("no demonstrations".into()))?;
        let action_dim = first.steps[0].act.len();
        let obs_dim = first.steps[0].obs.len();
        let norm_stats = NormStats::compute(&demos)?;
        Ok(Self {
            manifest: DatasetManifest {
                format_version: FORMAT_VERSION,
                task,
                action_dim,
                obs_dim,
                norm_stats,
                count: demos.len(),
            },
            demos,
        })
    }

    pub fn layout(&self) -> Result<ActionLayout> {
        ActionLayout::from_dim(self.manifest.action_dim)
    }

    pub fn max_episode_len(&self) -> usize {
        self.demos.iter().map(Demonstration::len).max().unwrap_or(0)
    }

    pub fn train_positions(&self) -> Vec<[f64; 2]> {
        self.demos.iter().map(Demonstration::primary_position).collect()
    }

    /// Copy with every observation and action mapped to `[-1, 1]`.
    pub fn normalized(&self) -> Vec<Demonstration> {
        let st = &self.manifest.norm_stats;
        self.demos
            .iter()
            .map(|d| Demonstration {
                steps: d
                    .steps
                    .iter()
                    .map(|s| DemoStep {
                        obs: st.normalize_obs(&s.obs),
                        act: st.normalize_action(&s.act),
                    })
                    .collect(),
                ..d.clone()
            })
            .collect()
    }
}
