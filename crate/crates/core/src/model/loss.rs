use coa_autodiff::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::dataset::ChainTarget;
use crate::error::{CoaError, Result};
use crate::model::{DecoderOutput, Forward, LossVariant, TokenBatch};

/// Scalar values of the loss terms. `lat` holds whichever auxiliary term
/// the loss variant selects.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub act: f64,
    pub lat: f64,
    pub stop: f64,
}

/// Builds the training objective on the forward graph.
///
/// Each sample contributes equally: the action term averages over its
/// supervised `(head, position)` pairs, the latent and stop terms over its
/// real positions. Chunk orderings train only the base head's L1 term.
pub fn compute_losses(
    fwd: &mut Forward,
    out: &DecoderOutput,
    batch: &TokenBatch,
    targets: &[&ChainTarget],
) -> Result<(Var, LossBreakdown)> {
    let cfg = fwd.cfg;
    let bsz = targets.len();
    if bsz != out.lens.len() {
        return Err(CoaError::Loss(format!("{bsz} targets for {} decoded chains", out.lens.len())));
    }
    let chunked = cfg.ordering.is_chunked();
    let heads = if chunked { 1 } else { cfg.mtp_heads };
    let rows: usize = out.lens.iter().sum();
    let a = cfg.action_dim;

    let mut pairs = vec![0usize; bsz];
    for (b, t) in targets.iter().enumerate() {
        for h in 1..=heads {
            pairs[b] += (0..out.lens[b]).filter(|&j| t.mtp_target(h, j).is_some()).count();
        }
        if pairs[b] == 0 {
            return Err(CoaError::Loss(format!("sample {b} has no supervised token")));
        }
    }

    let g_act = {
        let mut total: Option<Var> = None;
        for h in 1..=heads {
            let mut tgt = vec![0.0; rows * a];
            let mut w = vec![0.0; rows];
            for (b, t) in targets.iter().enumerate() {
                for j in 0..out.lens[b] {
                    if let Some(k) = t.mtp_target(h, j) {
                        let r = out.offsets[b] + j;
                        tgt[r * a..(r + 1) * a].copy_from_slice(&t.tokens[k]);
                        w[r] = 1.0 / (bsz * pairs[b]) as f64;
                    }
                }
            }
            if w.iter().all(|&x| x == 0.0) {
                continue;
            }
            let tv = fwd.g.constant(Tensor::new(vec![rows, a], tgt)?);
            let l = fwd.g.l1_loss(out.head_actions[h - 1], tv, Some(&w))?;
            total = Some(match total {
                Some(acc) => fwd.g.add(acc, l)?,
                None => l,
            });
        }
        total.ok_or_else(|| CoaError::Loss("no supervised token in batch".into()))?
    };

    // Per-row weights over real positions.
    let mut w_pos = vec![0.0; rows];
    let mut labels = vec![0.0; rows];
    for (b, t) in targets.iter().enumerate() {
        let n = (0..out.lens[b]).filter(|&j| t.mask[j]).count();
        for j in 0..out.lens[b] {
            if t.mask[j] {
                w_pos[out.offsets[b] + j] = 1.0 / (bsz * n) as f64;
                labels[out.offsets[b] + j] = t.stop[j];
            }
        }
    }

    let mut total = fwd.g.scale(g_act, cfg.loss_weights.act)?;
    let mut parts = LossBreakdown {
        act: fwd.g.value(g_act).item(),
        ..Default::default()
    };
    if !chunked {
        let g_lat = match cfg.loss_variant {
            LossVariant::LatentConsistency => fwd.g.mse_loss(out.head_latents[0], batch.embedded, Some(&w_pos))?,
            LossVariant::ActionReconstruction => {
                let rec = fwd.linear(batch.embedded, "act.dec")?;
                fwd.g.l1_loss(rec, batch.tokens, Some(&w_pos))?
            }
        };
        let g_stop = fwd.g.bce_with_logits(out.stop_logits, &labels, Some(&w_pos))?;
        parts.lat = fwd.g.value(g_lat).item();
        parts.stop = fwd.g.value(g_stop).item();
        let l = fwd.g.scale(g_lat, cfg.loss_weights.lat)?;
        total = fwd.g.add(total, l)?;
        let s = fwd.g.scale(g_stop, cfg.loss_weights.stop)?;
        total = fwd.g.add(total, s)?;
    }
    parts.total = fwd.g.value(total).item();
    Ok((total, parts))
}
