//! Behavior-cloning loop: uniform `(episode, t)` sampling, teacher-forced
//! loss, AdamW, periodic checkpoints and evaluation.

mod checkpoint;
mod trace;

use std::path::{Path, PathBuf};

use coa_autodiff::rng::derive_key;
use coa_autodiff::{AdamWConfig, AdamWState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{bounding_box, build_chain_target, ChainTarget, Dataset, NormStats};
use crate::error::{CoaError, Result};
use crate::model::{compute_losses, prepare_obs, Forward, LossBreakdown, ModelConfig, Policy, Profile};
use crate::sim::TaskSpec;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_as, save_checkpoint, Checkpoint, RngState,
    CHECKPOINT_VERSION,
};
pub use trace::{read_trace, write_trace, TraceRow, TRACE_HEADER};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Evaluate every this many iterations; 0 disables.
    pub eval_every: u64,
    /// Save a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: u64,
    pub profile: Profile,
    /// Episodes per periodic evaluation.
    pub eval_episodes: usize,
}

impl TrainConfig {
    /// 20 000 iterations at batch 128.
    pub fn paper(seed: u64) -> Self {
        Self {
            iterations: 20_000,
            batch_size: 128,
            lr: 1e-4,
            weight_decay: 1e-4,
            seed,
            eval_every: 0,
            checkpoint_every: 0,
            profile: Profile::Paper,
            eval_episodes: 10,
        }
    }

    /// 2 000 iterations at batch 32 with learning rate 1e-3: a fortieth of
    /// the samples is too few for the continuation head to learn at 1e-4.
    pub fn desk(seed: u64) -> Self {
        Self {
            iterations: 2_000,
            batch_size: 32,
            lr: 1e-3,
            profile: Profile::Desk,
            ..Self::paper(seed)
        }
    }

    pub fn for_profile(profile: Profile, seed: u64) -> Self {
        match profile {
            Profile::Paper => Self::paper(seed),
            Profile::Desk => Self::desk(seed),
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoaError::Config(m));
        if self.iterations == 0 {
            return bad("iterations must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight decay {} must be non-negative", self.weight_decay));
        }
        Ok(())
    }
}

/// Seed of the initial parameters for a run.
pub fn init_seed(train_seed: u64) -> u64 {
    derive_key(&[0x1417, train_seed])
}

/// Sampler for the batch drawn at `iteration`; independent of every other
/// iteration, so a resumed run draws the same batches.
pub fn iteration_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_key(&[0xba7c, seed, iteration]))
}

/// One training sample: episode index and step within it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SampleIndex {
    pub episode: usize,
    pub t: usize,
}

/// Draws an episode uniformly, then a step uniformly within it.
pub fn sample_batch<R: Rng + ?Sized>(episode_lens: &[usize], batch: usize, rng: &mut R) -> Vec<SampleIndex> {
    (0..batch)
        .map(|_| {
            let episode = rng.random_range(0..episode_lens.len());
            let t = rng.random_range(0..episode_lens[episode]);
            SampleIndex { episode, t }
        })
        .collect()
}

/// Prepared model inputs and chain targets for every `(episode, t)`.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub task: TaskSpec,
    pub stats: NormStats,
    obs: Vec<Vec<Vec<f64>>>,
    targets: Vec<Vec<ChainTarget>>,
    positions: Vec<[f64; 2]>,
}

impl TrainData {
    pub fn new(dataset: &Dataset, task: &TaskSpec, model: &ModelConfig) -> Result<Self> {
        let m = &dataset.manifest;
        if m.task != task.task {
            return Err(CoaError::Config(format!(
                "dataset holds {} demonstrations, task is {}",
                m.task.name(),
                task.task.name()
            )));
        }
        if m.action_dim != model.action_dim {
            return Err(CoaError::Config(format!(
                "dataset action dim {} does not match model action dim {}",
                m.action_dim, model.action_dim
            )));
        }
        if dataset.demos.is_empty() || dataset.demos.iter().any(|d| d.is_empty()) {
            return Err(CoaError::Dataset("training needs non-empty demonstrations".into()));
        }
        let longest = dataset.max_episode_len();
        if !model.ordering.is_chunked() && model.max_len < longest {
            return Err(CoaError::Config(format!(
                "max_len {} is shorter than the longest episode ({longest} steps)",
                model.max_len
            )));
        }
        let stats = m.norm_stats.clone();
        let normalized = dataset.normalized();
        let mut obs = Vec::with_capacity(dataset.demos.len());
        let mut targets = Vec::with_capacity(dataset.demos.len());
        for (raw, norm) in dataset.demos.iter().zip(&normalized) {
            let o: Vec<Vec<f64>> = raw.steps.iter().map(|s| prepare_obs(&model.obs, task, &stats, &s.obs)).collect();
            if let Some(bad) = o.iter().find(|v| v.len() != model.obs.input_dim()) {
                return Err(CoaError::Config(format!(
                    "prepared observation has {} entries, model expects {}",
                    bad.len(),
                    model.obs.input_dim()
                )));
            }
            obs.push(o);
            targets.push(
                (0..norm.len())
                    .map(|t| build_chain_target(norm, t, model.ordering, model.max_len, model.mtp_heads))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Ok(Self {
            task: task.clone(),
            stats,
            obs,
            targets,
            positions: dataset.train_positions(),
        })
    }

    pub fn episode_lens(&self) -> Vec<usize> {
        self.obs.iter().map(Vec::len).collect()
    }

    pub fn n_samples(&self) -> usize {
        self.obs.iter().map(Vec::len).sum()
    }

    pub fn obs(&self, s: SampleIndex) -> &[f64] {
        &self.obs[s.episode][s.t]
    }

    pub fn target(&self, s: SampleIndex) -> &ChainTarget {
        &self.targets[s.episode][s.t]
    }

    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }
}

/// Loss of `policy` on a batch, with its gradients applied by `opt`.
/// `training` carries the dropout stream `(seed, iteration)`.
pub fn train_step(
    policy: &mut Policy,
    opt: &mut AdamWState,
    data: &TrainData,
    picks: &[SampleIndex],
    training: (u64, u64),
) -> Result<LossBreakdown> {
    let (parts, grads) = {
        let mut fwd = Forward::new(policy, Some(training));
        fwd.bind_all();
        let obs: Vec<&[f64]> = picks.iter().map(|&s| data.obs(s)).collect();
        let targets: Vec<&ChainTarget> = picks.iter().map(|&s| data.target(s)).collect();
        let (memory, segs) = fwd.encode(&obs)?;
        let (out, batch) = fwd.teacher_forced(memory, &segs, &targets, false)?;
        let (loss, parts) = compute_losses(&mut fwd, &out, &batch, &targets)?;
        if ![parts.total, parts.act, parts.lat, parts.stop].iter().all(|v| v.is_finite()) {
            return Err(CoaError::NonFiniteLoss {
                iteration: training.1,
                total: parts.total,
                act: parts.act,
                lat: parts.lat,
                stop: parts.stop,
            });
        }
        let mut g = fwd.g.backward(loss)?;
        (parts, fwd.binder().collect(&mut g))
    };
    opt.step(&mut policy.params, &grads)?;
    Ok(parts)
}

/// Success rate of a policy snapshot, given the iteration count so far.
pub type EvalHook<'a> = dyn FnMut(&Policy, u64) -> Result<f64> + 'a;

/// Optional side effects of a run.
#[derive(Default)]
pub struct TrainHooks<'a> {
    pub eval: Option<&'a mut EvalHook<'a>>,
    /// Directory for scheduled checkpoints (`iter_<n>.ckpt`).
    pub checkpoint_dir: Option<PathBuf>,
}

/// Final state of a run plus the trace rows it produced.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceRow>,
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("iter_{iteration:06}.ckpt"))
}

/// Checkpoint at iteration 0: fresh parameters and optimizer.
pub fn initial_checkpoint(data: &TrainData, model: &ModelConfig, train: &TrainConfig) -> Result<Checkpoint> {
    model.validate()?;
    train.validate()?;
    let lens = data.episode_lens();
    let capacity = lens.len() * lens.iter().copied().max().unwrap_or(0);
    if train.batch_size > capacity {
        return Err(CoaError::Config(format!(
            "batch size {} exceeds the {capacity} available samples",
            train.batch_size
        )));
    }
    let policy = Policy::init(model.clone(), init_seed(train.seed))?;
    Ok(Checkpoint {
        model: model.clone(),
        train: train.clone(),
        task: data.task.clone(),
        norm_stats: data.stats.clone(),
        train_bbox: Some(bounding_box(data.positions())?),
        params: policy.params,
        optimizer: AdamWState::new(train.optimizer()),
        iteration: 0,
        rng: RngState {
            seed: train.seed,
            next_iteration: 0,
        },
    })
}

/// Trains from scratch.
pub fn train(data: &TrainData, model: &ModelConfig, train: &TrainConfig) -> Result<TrainOutcome> {
    run(data, initial_checkpoint(data, model, train)?, TrainHooks::default())
}

/// Continues `start` until `start.train.iterations`.
pub fn run(data: &TrainData, start: Checkpoint, mut hooks: TrainHooks) -> Result<TrainOutcome> {
    if start.norm_stats != data.stats || start.task != data.task {
        return Err(CoaError::Config(
            "checkpoint was trained on different data (task or normalization stats differ)".into(),
        ));
    }
    let Checkpoint {
        model,
        train,
        task,
        norm_stats,
        train_bbox,
        params,
        mut optimizer,
        iteration,
        rng,
    } = start;
    let mut policy = Policy::from_params(model, params)?;
    let lens = data.episode_lens();
    let mut trace = Vec::new();
    let snapshot = |policy: &Policy, optimizer: &AdamWState, done: u64| Checkpoint {
        model: policy.config.clone(),
        train: train.clone(),
        task: task.clone(),
        norm_stats: norm_stats.clone(),
        train_bbox,
        params: policy.params.clone(),
        optimizer: optimizer.clone(),
        iteration: done,
        rng: RngState {
            seed: rng.seed,
            next_iteration: done,
        },
    };
    for it in iteration..train.iterations {
        let picks = sample_batch(&lens, train.batch_size, &mut iteration_rng(rng.seed, it));
        let loss = train_step(&mut policy, &mut optimizer, data, &picks, (rng.seed, it))?;
        let done = it + 1;
        let eval_sr = match hooks.eval.as_mut() {
            Some(f) if train.eval_every > 0 && done % train.eval_every == 0 => Some(f(&policy, done)?),
            _ => None,
        };
        log::debug!("iter {it}: total {:.5} act {:.5} lat {:.5} stop {:.5}", loss.total, loss.act, loss.lat, loss.stop);
        if let Some(sr) = eval_sr {
            log::info!("iter {done}: eval success rate {sr:.3}");
        }
        trace.push(TraceRow { iter: it, loss, eval_sr });
        if let Some(dir) = &hooks.checkpoint_dir {
            if train.checkpoint_every > 0 && done % train.checkpoint_every == 0 {
                save_checkpoint(checkpoint_path(dir, done), &snapshot(&policy, &optimizer, done))?;
            }
        }
    }
    let done = iteration.max(train.iterations);
    let checkpoint = snapshot(&policy, &optimizer, done);
    Ok(TrainOutcome { checkpoint, trace })
}
