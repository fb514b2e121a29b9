//! Closed-loop execution: a fresh chain every step, temporal ensembling,
//! one action executed per step.

mod ensemble;

use std::fs;
use std::path::Path;

use coa_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::dataset::{renormalize_quaternion, ActionLayout, NormStats};
use crate::error::{CoaError, Result};
use crate::model::{prepare_obs, EnsembleConfig, GenerateContext, Policy};
use crate::sim::{Env, TaskSpec, GRIPPER_CLOSED, GRIPPER_OPEN};

pub use ensemble::{ensemble_next_action, head_align, tail_align, EnsembleBuffer, EnsembleEntry};

/// Per-rollout settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolloutOptions {
    pub ensemble: EnsembleConfig,
    /// Keep every generated chain (workspace units).
    pub record_chains: bool,
    /// Keep the decoder self-attention of every step.
    pub record_attention: bool,
}

impl RolloutOptions {
    pub fn new(ensemble: EnsembleConfig) -> Self {
        Self {
            ensemble,
            record_chains: false,
            record_attention: false,
        }
    }
}

/// Outcome of one episode. Serializes to the rollout log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub seed: u64,
    pub objects: Vec<[f64; 2]>,
    pub success: bool,
    pub steps: usize,
    /// Executed actions in workspace units.
    pub actions: Vec<Vec<f64>>,
    pub chain_lengths: Vec<usize>,
    pub buffer_sizes: Vec<usize>,
    /// Why the episode stopped early, if it did.
    pub failure: Option<String>,
    #[serde(skip)]
    pub chains: Vec<Vec<Vec<f64>>>,
    #[serde(skip)]
    pub attention: Vec<Vec<Tensor>>,
}

/// Unit quaternion and a binary gripper command, applied to every executed
/// action whether or not it was ensembled.
pub fn finalize_action(a: &mut [f64], layout: ActionLayout) {
    if let Some(q) = layout.quaternion() {
        renormalize_quaternion(&mut a[q]);
    }
    let g = layout.gripper_index();
    a[g] = if a[g] >= 0.0 { GRIPPER_OPEN } else { GRIPPER_CLOSED };
}

/// Runs `policy` on the episode `(spec, seed)` until success or the step
/// limit. Generation or execution failures end the episode unsuccessfully
/// and are reported in `failure`.
pub fn rollout_episode(
    policy: &Policy,
    spec: &TaskSpec,
    stats: &NormStats,
    seed: u64,
    opts: &RolloutOptions,
) -> Result<EpisodeResult> {
    let cfg = &policy.config;
    let layout = ActionLayout::from_dim(cfg.action_dim)?;
    let (mut env, mut obs) = Env::reset(spec, seed)?;
    let mut buffer = EnsembleBuffer::new(opts.ensemble.m, opts.ensemble.k, layout)?;
    let mut res = EpisodeResult {
        seed,
        objects: env.state().objects.clone(),
        success: false,
        steps: 0,
        actions: Vec::new(),
        chain_lengths: Vec::new(),
        buffer_sizes: Vec::new(),
        failure: None,
        chains: Vec::new(),
        attention: Vec::new(),
    };
    while !env.done() {
        let step = env.state().step;
        match next_action(policy, &env, &obs, stats, layout, &mut buffer, opts, &mut res) {
            Ok(action) => match env.step(&layout.to_planar(&action)) {
                Ok(out) => {
                    obs = out.observation;
                    res.actions.push(action);
                }
                Err(e) => {
                    res.failure = Some(format!("step {step}: {e}"));
                    break;
                }
            },
            Err(e @ (CoaError::Model(_) | CoaError::Autodiff(_) | CoaError::InvalidAction(_))) => {
                res.failure = Some(format!("step {step}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        }
    }
    res.steps = env.state().step;
    res.success = env.state().success;
    Ok(res)
}

#[allow(clippy::too_many_arguments)]
fn next_action(
    policy: &Policy,
    env: &Env,
    obs: &[f64],
    stats: &NormStats,
    layout: ActionLayout,
    buffer: &mut EnsembleBuffer,
    opts: &RolloutOptions,
    res: &mut EpisodeResult,
) -> Result<Vec<f64>> {
    let step = env.state().step;
    let ee = env.state().ee;
    let input = prepare_obs(&policy.config.obs, env.spec(), stats, obs);
    let ctx = GenerateContext {
        ee_xy: Some([ee[0], ee[1]]),
        stats: Some(stats),
    };
    let chain = policy.generate_chain(&input, &ctx)?;
    let tokens: Vec<Vec<f64>> = chain.tokens.iter().map(|a| stats.denormalize_pose(a, layout)).collect();
    res.chain_lengths.push(tokens.len());
    if opts.record_chains {
        res.chains.push(tokens.clone());
    }
    if opts.record_attention {
        res.attention.push(chain.attention);
    }
    let entry = EnsembleEntry::new(step, chain.ordering, tokens)?;
    let mut action = if opts.ensemble.enabled {
        buffer.push(entry)?;
        match ensemble_next_action(buffer, step + 1) {
            Ok(a) => a,
            Err(_) => buffer.newest().expect("just pushed").next_action().to_vec(),
        }
    } else {
        entry.next_action().to_vec()
    };
    res.buffer_sizes.push(if opts.ensemble.enabled { buffer.len() } else { 0 });
    finalize_action(&mut action, layout);
    Ok(action)
}

/// Writes the per-episode rollout log as pretty JSON.
pub fn write_rollout_log(path: impl AsRef<Path>, episode: &EpisodeResult) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(episode).map_err(|e| CoaError::Analysis(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CoaError::io(dir, e))?;
    }
    fs::write(path, json).map_err(|e| CoaError::io(path, e))
}
