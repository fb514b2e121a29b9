use serde::{Deserialize, Serialize};

use crate::error::{CoaError, Result};

/// Axis-aligned box around a set of 2-D positions (inclusive).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl BoundingBox {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        (0..2).all(|i| self.min[i] <= p[i] && p[i] <= self.max[i])
    }
}

pub fn bounding_box(positions: &[[f64; 2]]) -> Result<BoundingBox> {
    let first = *positions
        .first()
        .ok_or_else(|| CoaError::Dataset("bounding box of no positions".into()))?;
    Ok(positions.iter().fold(
        BoundingBox {
            min: first,
            max: first,
        },
        |b, p| BoundingBox {
            min: [b.min[0].min(p[0]), b.min[1].min(p[1])],
            max: [b.max[0].max(p[0]), b.max[1].max(p[1])],
        },
    ))
}

/// An evaluation episode identified by its reset seed and primary object position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCandidate {
    pub seed: u64,
    pub position: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialSplit {
    pub bbox: BoundingBox,
    pub interp: Vec<EvalCandidate>,
    pub extrap: Vec<EvalCandidate>,
}

/// Classifies `eval_pool` against the bounding box of `train_positions` and
/// keeps the first `n_each` of each class in seed order.
pub fn split_interp_extrap(
    train_positions: &[[f64; 2]],
    eval_pool: &[EvalCandidate],
    n_each: usize,
) -> Result<SpatialSplit> {
    let bbox = bounding_box(train_positions)?;
    let mut pool = eval_pool.to_vec();
    pool.sort_by_key(|c| c.seed);
    let (interp, extrap): (Vec<_>, Vec<_>) = pool.into_iter().partition(|c| bbox.contains(c.position));
    if interp.len() < n_each || extrap.len() < n_each {
        return Err(CoaError::Dataset(format!(
            "need {n_each} of each class, pool has {} interpolation and {} extrapolation episodes",
            interp.len(),
            extrap.len()
        )));
    }
    Ok(SpatialSplit {
        bbox,
        interp: interp.into_iter().take(n_each).collect(),
        extrap: extrap.into_iter().take(n_each).collect(),
    })
}

/// Sum over both axes of the population variance of `positions`.
pub fn spatial_variance(positions: &[[f64; 2]]) -> Result<f64> {
    if positions.len() < 2 {
        return Err(CoaError::Analysis(format!(
            "spatial variance needs at least 2 positions, got {}",
            positions.len()
        )));
    }
    let n = positions.len() as f64;
    Ok((0..2)
        .map(|i| {
            let mean = positions.iter().map(|p| p[i]).sum::<f64>() / n;
            positions.iter().map(|p| (p[i] - mean).powi(2)).sum::<f64>() / n
        })
        .sum())
}
