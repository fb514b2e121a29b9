//! Evaluation, correlation and attention diagnostics, the ablation matrix,
//! and the report artifacts.

mod ablation;
mod attention;
mod report;
mod stats;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{BoundingBox, NormStats};
use crate::error::{CoaError, Result};
use crate::executor::{rollout_episode, EpisodeResult, RolloutOptions};
use crate::model::Policy;
use crate::sim::{sample_objects, scripted_expert, Env, TaskId, TaskSpec};
use crate::trainer::Checkpoint;

pub use ablation::{
    paper_reference, run_ablation_matrix, AblationAxis, AblationCell, AblationMatrix, AblationPlan, CellVariant,
    MTP_AXIS,
};
pub use attention::{
    anchor_mass, attention_metrics, locality_mass, AttentionDump, LayerAttention, LayerDump, DEFAULT_LOCALITY_WINDOW,
};
pub use report::{emit_report, read_results_csv, AnalysisJson, ResultRow, RESULTS_HEADER};
pub use stats::{
    mean_std, paper_correlation, pearson, variance_success_analysis, Correlation, VarianceAnalysis, VariancePoint,
};

/// Version stamped into every emitted artifact.
pub const SCHEMA_VERSION: u32 = 1;
/// Episodes per evaluation, as in the original protocol.
pub const DEFAULT_EPISODES: usize = 25;
/// First evaluation seed; training seeds stay far below it.
pub const EVAL_SEED_BASE: u64 = 1 << 32;
/// Object spread of the split-evaluation pool, wider than training so both
/// sides of the training box are populated.
pub const EVAL_SPREAD: f64 = 0.2;
/// Candidates examined per requested episode before giving up on a split.
const POOL_FACTOR: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    All,
    Interp,
    Extrap,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::All => "all",
            Split::Interp => "interp",
            Split::Extrap => "extrap",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = CoaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Split::All),
            "interp" => Ok(Split::Interp),
            "extrap" => Ok(Split::Extrap),
            _ => Err(CoaError::Config(format!("unknown split {s:?} (all, interp, extrap)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub objects: Vec<[f64; 2]>,
    pub success: bool,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskId,
    pub variant: String,
    pub split: Split,
    pub n: usize,
    pub success_rate: f64,
    pub episodes: Vec<EpisodeRecord>,
}

impl EvalReport {
    pub fn from_episodes(task: TaskId, variant: impl Into<String>, split: Split, episodes: &[EpisodeResult]) -> Result<Self> {
        if episodes.is_empty() {
            return Err(CoaError::Analysis("evaluation without episodes".into()));
        }
        let successes = episodes.iter().filter(|e| e.success).count();
        Ok(Self {
            task,
            variant: variant.into(),
            split,
            n: episodes.len(),
            success_rate: successes as f64 / episodes.len() as f64,
            episodes: episodes
                .iter()
                .map(|e| EpisodeRecord {
                    seed: e.seed,
                    objects: e.objects.clone(),
                    success: e.success,
                    length: e.steps,
                })
                .collect(),
        })
    }

    pub fn successes(&self) -> usize {
        self.episodes.iter().filter(|e| e.success).count()
    }
}

/// Evaluation episodes for `split`: the task spec they run under and their
/// seeds, in increasing seed order.
///
/// `All` uses the training spread; the interpolation and extrapolation sets
/// are the first `n` pool seeds (spread [`EVAL_SPREAD`]) whose primary
/// object falls inside, respectively outside, `bbox`.
pub fn eval_episodes(spec: &TaskSpec, split: Split, n: usize, bbox: Option<&BoundingBox>) -> Result<(TaskSpec, Vec<u64>)> {
    if n == 0 {
        return Err(CoaError::Config("evaluation needs at least one episode".into()));
    }
    if split == Split::All {
        return Ok((spec.clone(), (0..n as u64).map(|i| EVAL_SEED_BASE + i).collect()));
    }
    let bbox = bbox.ok_or_else(|| CoaError::Analysis(format!("{split} split needs the training bounding box")))?;
    let pool = spec.clone().with_spread(EVAL_SPREAD);
    let want_inside = split == Split::Interp;
    let seeds: Vec<u64> = (0..(n * POOL_FACTOR) as u64)
        .map(|i| EVAL_SEED_BASE + i)
        .filter(|&s| bbox.contains(sample_objects(&pool, s)[0]) == want_inside)
        .take(n)
        .collect();
    if seeds.len() < n {
        return Err(CoaError::Analysis(format!(
            "only {} of {n} {split} episodes found among {} candidates",
            seeds.len(),
            n * POOL_FACTOR
        )));
    }
    Ok((pool, seeds))
}

/// Runs `policy` on every seed (in parallel) and summarizes.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_policy(
    policy: &Policy,
    spec: &TaskSpec,
    stats: &NormStats,
    seeds: &[u64],
    split: Split,
    variant: &str,
    opts: &RolloutOptions,
) -> Result<(EvalReport, Vec<EpisodeResult>)> {
    let episodes = seeds
        .par_iter()
        .map(|&s| rollout_episode(policy, spec, stats, s, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok((EvalReport::from_episodes(spec.task, variant, split, &episodes)?, episodes))
}

/// Evaluates a checkpoint on `n` episodes of `split`.
pub fn evaluate(ck: &Checkpoint, n: usize, split: Split, variant: &str, opts: &RolloutOptions) -> Result<(EvalReport, Vec<EpisodeResult>)> {
    let policy = ck.policy()?;
    let (spec, seeds) = eval_episodes(&ck.task, split, n, ck.train_bbox.as_ref())?;
    evaluate_policy(&policy, &spec, &ck.norm_stats, &seeds, split, variant, opts)
}

/// Replays the scripted expert's actions through a fresh environment.
pub fn expert_episode(spec: &TaskSpec, seed: u64) -> Result<EpisodeResult> {
    let demo = scripted_expert(spec, seed)?;
    let (mut env, _) = Env::reset(spec, seed)?;
    let objects = env.state().objects.clone();
    let mut actions = Vec::new();
    for step in &demo.steps {
        if env.done() {
            break;
        }
        env.step(&step.act)?;
        actions.push(step.act.clone());
    }
    Ok(EpisodeResult {
        seed,
        objects,
        success: env.state().success,
        steps: env.state().step,
        chain_lengths: Vec::new(),
        buffer_sizes: Vec::new(),
        actions,
        failure: None,
        chains: Vec::new(),
        attention: Vec::new(),
    })
}

pub fn evaluate_expert(spec: &TaskSpec, seeds: &[u64], split: Split) -> Result<EvalReport> {
    let episodes = seeds
        .par_iter()
        .map(|&s| expert_episode(spec, s))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_episodes(spec.task, "expert", split, &episodes)
}
