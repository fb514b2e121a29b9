//! Finite-difference check of the whole training objective.

use coa_autodiff::gradcheck::{grad_check, DEFAULT_EPS};
use coa_autodiff::{AutodiffError, Graph, Var};

use crate::dataset::{build_chain_target, DemoStep, Demonstration, Ordering};
use crate::error::Result;
use crate::model::{compute_losses, Forward, ModelConfig, ObsSpec, Policy};
use crate::sim::TaskId;

/// Small enough to difference every parameter; chains of 3 tokens.
pub fn grad_check_config() -> ModelConfig {
    let obs = ObsSpec::State { groups: vec![2, 3] };
    ModelConfig {
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        d_model: 8,
        d_ff: 12,
        dropout: 0.0,
        mtp_heads: 2,
        max_len: 3,
        ..ModelConfig::desk(4, obs)
    }
}

fn toy_demo() -> Demonstration {
    let steps = (0..3)
        .map(|k| {
            let k = k as f64;
            DemoStep {
                obs: vec![0.3 - 0.2 * k, 0.1 * k, -0.4, 0.25 * k, 0.7],
                act: vec![0.5 - 0.3 * k, -0.6 + 0.4 * k, 0.2 * k - 0.1, if k < 2.0 { 1.0 } else { -1.0 }],
            }
        })
        .collect();
    Demonstration {
        task: TaskId::ReachTarget,
        seed: 0,
        steps,
        success: true,
        object_positions: vec![[0.5, 0.5]],
    }
}

/// Largest relative error between the tape gradient and central differences
/// of the total loss, per parameter, for a 3-token reverse chain (plus a
/// shorter one so padding and batching are exercised).
pub fn policy_grad_check(seed: u64) -> Result<Vec<(String, f64)>> {
    let cfg = grad_check_config();
    let policy = Policy::init(cfg.clone(), seed)?;
    let demo = toy_demo();
    let targets = [
        build_chain_target(&demo, 0, Ordering::Reverse, cfg.max_len, cfg.mtp_heads)?,
        build_chain_target(&demo, 1, Ordering::Reverse, cfg.max_len, cfg.mtp_heads)?,
    ];
    let target_refs: Vec<_> = targets.iter().collect();
    let obs: Vec<&[f64]> = vec![&demo.steps[0].obs, &demo.steps[1].obs];
    let mut out = Vec::new();
    for (name, value) in policy.params.iter() {
        let err = grad_check(
            |g: &mut Graph, x| {
                let mut fwd = Forward::with_graph(&policy, std::mem::take(g), None);
                let loss = (|| -> Result<Var> {
                    fwd.bind_param(name, x)?;
                    let (memory, segs) = fwd.encode(&obs)?;
                    let (dec, batch) = fwd.teacher_forced(memory, &segs, &target_refs, false)?;
                    Ok(compute_losses(&mut fwd, &dec, &batch, &target_refs)?.0)
                })();
                *g = fwd.into_graph();
                loss.map_err(|e| AutodiffError::GradCheck(e.to_string()))
            },
            value,
            DEFAULT_EPS,
        )?;
        out.push((name.clone(), err));
    }
    Ok(out)
}
