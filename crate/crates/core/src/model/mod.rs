//! Transformer encoder–decoder policy that emits an action chain, keyframe
//! first, with parallel refinement heads and a continuation head.

mod config;
mod generate;
mod gradcheck;
mod init;
mod loss;
mod net;

use coa_autodiff::ParamStore;

use crate::dataset::NormStats;
use crate::error::{CoaError, Result};
use crate::sim::{render, TaskSpec, RASTER_SIZE};

pub use config::{EnsembleConfig, LatentFeed, LossVariant, LossWeights, ModelConfig, ObsSpec, Profile, StopRule};
pub use generate::{GenerateContext, GeneratedChain};
pub use gradcheck::{grad_check_config, policy_grad_check};
pub use init::{init_params, param_shapes};
pub use loss::{compute_losses, LossBreakdown};
pub use net::{DecoderOutput, Forward, TokenBatch};

/// Patch edge length for image observations.
pub const RASTER_PATCH: usize = 8;
/// Leading state entries (end-effector pose and gripper) given to the image
/// encoder as a separate token.
pub const PROPRIO_DIM: usize = 4;

/// A configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Policy {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking them against `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        check_params(&config, &params)?;
        Ok(Self { config, params })
    }
}

/// Verifies that `store` has exactly the parameters `cfg` needs, naming the
/// first one (in construction order) that is missing or misshapen.
pub fn check_params(cfg: &ModelConfig, store: &ParamStore) -> Result<()> {
    let shapes = param_shapes(cfg);
    for (name, shape) in &shapes {
        match store.get(name) {
            None => return Err(CoaError::Model(format!("missing parameter {name}"))),
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(CoaError::Model(format!(
                    "parameter {name} has shape {:?}, config expects {shape:?}",
                    t.shape()
                )))
            }
            _ => {}
        }
    }
    if store.len() != shapes.len() {
        let known: std::collections::HashSet<&str> = shapes.iter().map(|(n, _)| n.as_str()).collect();
        let extra = store.names().find(|n| !known.contains(n)).unwrap_or_default();
        return Err(CoaError::Model(format!("unexpected parameter {extra}")));
    }
    Ok(())
}

/// Observation layout for a task: state groups, or a rendered image.
pub fn obs_spec_for(task: &TaskSpec, raster: bool) -> ObsSpec {
    if raster {
        ObsSpec::Raster {
            size: RASTER_SIZE,
            patch: RASTER_PATCH,
            proprio: PROPRIO_DIM,
        }
    } else {
        ObsSpec::State {
            groups: task.obs_groups(),
        }
    }
}

/// Maps a raw simulator observation to the model's input vector.
pub fn prepare_obs(spec: &ObsSpec, task: &TaskSpec, stats: &NormStats, raw: &[f64]) -> Vec<f64> {
    let norm = stats.normalize_obs(raw);
    match spec {
        ObsSpec::State { .. } => norm,
        ObsSpec::Raster { proprio, .. } => {
            let mut v = render(task, raw);
            v.extend_from_slice(&norm[..*proprio]);
            v
        }
    }
}
