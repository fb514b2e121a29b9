//! Train/evaluate grid over one-axis-at-a-time variations of a base config.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{evaluate, mean_std, EvalReport, Split};
use crate::dataset::{Dataset, Ordering};
use crate::error::{CoaError, Result};
use crate::executor::RolloutOptions;
use crate::model::{EnsembleConfig, LossVariant, ModelConfig};
use crate::sim::TaskSpec;
use crate::trainer::{initial_checkpoint, run, Checkpoint, TrainConfig, TrainData, TrainHooks};

/// Head counts of the multi-token sweep.
pub const MTP_AXIS: [usize; 6] = [1, 2, 4, 5, 8, 10];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Ordering,
    Loss,
    Ensemble,
    MtpHeads,
    Baseline,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 5] = [
        AblationAxis::Ordering,
        AblationAxis::Loss,
        AblationAxis::Ensemble,
        AblationAxis::MtpHeads,
        AblationAxis::Baseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Ordering => "ordering",
            AblationAxis::Loss => "loss",
            AblationAxis::Ensemble => "ensemble",
            AblationAxis::MtpHeads => "mtp_heads",
            AblationAxis::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| CoaError::Config(format!("unknown ablation axis {s:?}")))
    }

    pub fn variants(self) -> Vec<CellVariant> {
        match self {
            AblationAxis::Ordering => [Ordering::Reverse, Ordering::Forward, Ordering::Hybrid]
                .into_iter()
                .map(CellVariant::Ordering)
                .collect(),
            AblationAxis::Loss => [LossVariant::LatentConsistency, LossVariant::ActionReconstruction]
                .into_iter()
                .map(CellVariant::Loss)
                .collect(),
            AblationAxis::Ensemble => vec![CellVariant::Ensemble(true), CellVariant::Ensemble(false)],
            AblationAxis::MtpHeads => MTP_AXIS.into_iter().map(CellVariant::MtpHeads).collect(),
            AblationAxis::Baseline => vec![CellVariant::Baseline(Ordering::Chunk), CellVariant::Baseline(Ordering::ChunkKf)],
        }
    }
}

/// The single setting a cell changes relative to the base config.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "axis", content = "value")]
pub enum CellVariant {
    Ordering(Ordering),
    Loss(LossVariant),
    Ensemble(bool),
    MtpHeads(usize),
    Baseline(Ordering),
}

impl CellVariant {
    pub fn axis(self) -> AblationAxis {
        match self {
            CellVariant::Ordering(_) => AblationAxis::Ordering,
            CellVariant::Loss(_) => AblationAxis::Loss,
            CellVariant::Ensemble(_) => AblationAxis::Ensemble,
            CellVariant::MtpHeads(_) => AblationAxis::MtpHeads,
            CellVariant::Baseline(_) => AblationAxis::Baseline,
        }
    }

    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut m = base.clone();
        match self {
            CellVariant::Ordering(o) | CellVariant::Baseline(o) => m.ordering = o,
            CellVariant::Loss(l) => m.loss_variant = l,
            CellVariant::Ensemble(on) => m.ensemble.enabled = on,
            CellVariant::MtpHeads(h) => m.mtp_heads = h,
        }
        m
    }
}

impl fmt::Display for CellVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CellVariant::Ordering(o) => write!(f, "{o}"),
            CellVariant::Loss(LossVariant::LatentConsistency) => f.write_str("latent_consistency"),
            CellVariant::Loss(LossVariant::ActionReconstruction) => f.write_str("action_reconstruction"),
            CellVariant::Ensemble(true) => f.write_str("ensemble_on"),
            CellVariant::Ensemble(false) => f.write_str("ensemble_off"),
            CellVariant::MtpHeads(h) => write!(f, "mtp_{h}"),
            CellVariant::Baseline(o) => write!(f, "{o}"),
        }
    }
}

/// Average success rate reported for the matching setting in the original
/// ablation (display metadata only).
pub fn paper_reference(v: CellVariant) -> Option<f64> {
    Some(match v {
        CellVariant::Ordering(Ordering::Reverse) => 0.756,
        CellVariant::Ordering(Ordering::Forward) => 0.668,
        CellVariant::Ordering(Ordering::Hybrid) => 0.600,
        CellVariant::Loss(LossVariant::LatentConsistency) => 0.756,
        CellVariant::Loss(LossVariant::ActionReconstruction) => 0.212,
        CellVariant::Ensemble(true) => 0.756,
        CellVariant::Ensemble(false) => 0.66,
        CellVariant::MtpHeads(1) => 0.710,
        CellVariant::MtpHeads(2) => 0.704,
        CellVariant::MtpHeads(4) => 0.720,
        CellVariant::MtpHeads(5) => 0.756,
        CellVariant::MtpHeads(8) => 0.672,
        CellVariant::MtpHeads(10) => 0.660,
        CellVariant::Baseline(Ordering::Chunk) => 0.488,
        CellVariant::Baseline(Ordering::ChunkKf) => 0.516,
        _ => return None,
    })
}

/// Everything shared by the cells of one matrix.
#[derive(Clone, Debug)]
pub struct AblationPlan {
    pub task: TaskSpec,
    pub dataset: Dataset,
    pub base_model: ModelConfig,
    /// Base training config; its seed is replaced by each entry of `seeds`.
    pub train: TrainConfig,
    pub axes: Vec<AblationAxis>,
    pub seeds: Vec<u64>,
    pub episodes: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: CellVariant,
    pub label: String,
    /// One report per seed that trained and evaluated successfully.
    pub reports: Vec<(u64, EvalReport)>,
    /// Seeds whose run aborted, with the reason.
    pub failures: Vec<(u64, String)>,
    pub paper_ref: Option<f64>,
}

impl AblationCell {
    pub fn mean_std(&self) -> (f64, f64) {
        let rates: Vec<f64> = self.reports.iter().map(|(_, r)| r.success_rate).collect();
        mean_std(&rates)
    }

    pub fn failed(&self) -> bool {
        self.reports.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationMatrix {
    pub cells: Vec<AblationCell>,
}

impl AblationMatrix {
    pub fn cell(&self, variant: CellVariant) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.variant == variant)
    }
}

/// Key under which a trained model is shared: cells that differ only at
/// execution time (the ensemble axis) reuse one checkpoint.
fn training_key(model: &ModelConfig, seed: u64) -> String {
    let m = ModelConfig {
        ensemble: EnsembleConfig::default(),
        ..model.clone()
    };
    format!("{seed}:{}", serde_json::to_string(&m).unwrap_or_default())
}

fn train_cell(plan: &AblationPlan, model: &ModelConfig, seed: u64) -> Result<Checkpoint> {
    let train = TrainConfig {
        seed,
        ..plan.train.clone()
    };
    let data = TrainData::new(&plan.dataset, &plan.task, model)?;
    let start = initial_checkpoint(&data, model, &train)?;
    Ok(run(&data, start, TrainHooks::default())?.checkpoint)
}

/// Trains and evaluates every cell on every seed. A failing run is
/// recorded in its cell and the matrix carries on.
pub fn run_ablation_matrix(plan: &AblationPlan) -> Result<AblationMatrix> {
    if plan.seeds.is_empty() || plan.axes.is_empty() {
        return Err(CoaError::Config("ablation needs at least one axis and one seed".into()));
    }
    let mut trained: HashMap<String, std::result::Result<Checkpoint, String>> = HashMap::new();
    let mut cells = Vec::new();
    for axis in &plan.axes {
        for variant in axis.variants() {
            let model = variant.apply(&plan.base_model);
            let label = variant.to_string();
            let mut cell = AblationCell {
                variant,
                label: label.clone(),
                reports: Vec::new(),
                failures: Vec::new(),
                paper_ref: paper_reference(variant),
            };
            for &seed in &plan.seeds {
                let ck = trained
                    .entry(training_key(&model, seed))
                    .or_insert_with(|| {
                        log::info!("ablation: training {label} (seed {seed})");
                        train_cell(plan, &model, seed).map_err(|e| e.to_string())
                    })
                    .clone();
                let outcome = ck.map_err(CoaError::Analysis).and_then(|ck| {
                    let opts = RolloutOptions::new(model.ensemble);
                    evaluate(&ck, plan.episodes, plan.split, &label, &opts)
                });
                match outcome {
                    Ok((report, _)) => cell.reports.push((seed, report)),
                    Err(e) => {
                        log::warn!("ablation: {label} seed {seed} failed: {e}");
                        cell.failures.push((seed, e.to_string()));
                    }
                }
            }
            cells.push(cell);
        }
    }
    Ok(AblationMatrix { cells })
}
