use serde::{Deserialize, Serialize};

use crate::dataset::{renormalize_quaternion, ActionLayout, Demonstration};
use crate::error::{CoaError, Result};

/// Per-dimension ranges used to map actions and observations to `[-1, 1]`.
///
/// A dimension whose range is empty (`max == min`) is constant: it
/// normalizes to 0 and denormalizes back to `min`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub action_min: Vec<f64>,
    pub action_max: Vec<f64>,
    pub obs_min: Vec<f64>,
    pub obs_max: Vec<f64>,
}

fn ranges<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut lo: Vec<f64> = Vec::new();
    let mut hi: Vec<f64> = Vec::new();
    for r in rows {
        if lo.is_empty() {
            lo = r.to_vec();
            hi = r.to_vec();
            continue;
        }
        if r.len() != lo.len() {
            return Err(CoaError::Dataset(format!("ragged vectors: {} vs {}", r.len(), lo.len())));
        }
        for (i, &v) in r.iter().enumerate() {
            if !v.is_finite() {
                return Err(CoaError::Dataset(format!("non-finite value in dimension {i}")));
            }
            lo[i] = lo[i].min(v);
            hi[i] = hi[i].max(v);
        }
    }
    if lo.is_empty() {
        return Err(CoaError::Dataset("no samples to compute statistics from".into()));
    }
    Ok((lo, hi))
}

fn norm(x: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(lo.iter().zip(hi))
        .map(|(&v, (&a, &b))| if b > a { 2.0 * (v - a) / (b - a) - 1.0 } else { 0.0 })
        .collect()
}

fn denorm(x: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(lo.iter().zip(hi))
        .map(|(&v, (&a, &b))| if b > a { (v + 1.0) / 2.0 * (b - a) + a } else { a })
        .collect()
}

impl NormStats {
    pub fn compute(demos: &[Demonstration]) -> Result<Self> {
        let steps = || demos.iter().flat_map(|d| d.steps.iter());
        let (action_min, action_max) = ranges(steps().map(|s| s.act.as_slice()))?;
        let (obs_min, obs_max) = ranges(steps().map(|s| s.obs.as_slice()))?;
        Ok(Self {
            action_min,
            action_max,
            obs_min,
            obs_max,
        })
    }

    pub fn action_dim(&self) -> usize {
        self.action_min.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_min.len()
    }

    pub fn action_constant(&self) -> Vec<bool> {
        self.action_min.iter().zip(&self.action_max).map(|(a, b)| a == b).collect()
    }

    pub fn obs_constant(&self) -> Vec<bool> {
        self.obs_min.iter().zip(&self.obs_max).map(|(a, b)| a == b).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |lo: &[f64], hi: &[f64]| lo.len() == hi.len() && lo.iter().zip(hi).all(|(a, b)| a <= b);
        if ok(&self.action_min, &self.action_max) && ok(&self.obs_min, &self.obs_max) {
            Ok(())
        } else {
            Err(CoaError::Dataset("normalization stats need min <= max per dimension".into()))
        }
    }

    pub fn normalize_action(&self, a: &[f64]) -> Vec<f64> {
        norm(a, &self.action_min, &self.action_max)
    }

    pub fn denormalize_action(&self, a: &[f64]) -> Vec<f64> {
        denorm(a, &self.action_min, &self.action_max)
    }

    pub fn normalize_obs(&self, o: &[f64]) -> Vec<f64> {
        norm(o, &self.obs_min, &self.obs_max)
    }

    pub fn denormalize_obs(&self, o: &[f64]) -> Vec<f64> {
        denorm(o, &self.obs_min, &self.obs_max)
    }

    /// Denormalizes and, for pose layouts, rescales the quaternion to unit norm.
    pub fn denormalize_pose(&self, a: &[f64], layout: ActionLayout) -> Vec<f64> {
        let mut out = self.denormalize_action(a);
        if let Some(q) = layout.quaternion() {
            renormalize_quaternion(&mut out[q]);
        }
        out
    }
}
