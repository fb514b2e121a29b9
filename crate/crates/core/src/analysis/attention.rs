use coa_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CoaError, Result};

/// Window used when none is given.
pub const DEFAULT_LOCALITY_WINDOW: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAttention {
    pub layer: usize,
    /// Mean attention mass on the `w` positions behind the diagonal and the
    /// diagonal itself.
    pub locality_mass: f64,
    /// Mean attention mass on position 0 (the keyframe), rows 1.. only.
    pub anchor_mass: f64,
}

fn check(map: &Tensor) -> Result<(usize, usize)> {
    match map.shape() {
        &[h, n, m] if n == m && n > 0 && h > 0 => Ok((h, n)),
        s => Err(CoaError::Analysis(format!("attention map must be [heads, n, n], got {s:?}"))),
    }
}

/// Locality mass of one `[heads, n, n]` map, averaged over heads and rows.
pub fn locality_mass(map: &Tensor, w: usize) -> Result<f64> {
    let (heads, n) = check(map)?;
    let d = map.data();
    let mut total = 0.0;
    for h in 0..heads {
        for i in 0..n {
            let row = &d[(h * n + i) * n..(h * n + i + 1) * n];
            total += row[i.saturating_sub(w)..=i].iter().sum::<f64>();
        }
    }
    Ok(total / (heads * n) as f64)
}

/// Anchor mass of one map; 0 for single-row maps.
pub fn anchor_mass(map: &Tensor) -> Result<f64> {
    let (heads, n) = check(map)?;
    if n < 2 {
        return Ok(0.0);
    }
    let d = map.data();
    let total: f64 = (0..heads)
        .flat_map(|h| (1..n).map(move |i| (h * n + i) * n))
        .map(|r| d[r])
        .sum();
    Ok(total / (heads * (n - 1)) as f64)
}

/// Metrics for each decoder layer's self-attention map.
pub fn attention_metrics(maps: &[Tensor], w: usize) -> Result<Vec<LayerAttention>> {
    maps.iter()
        .enumerate()
        .map(|(layer, m)| {
            Ok(LayerAttention {
                layer,
                locality_mass: locality_mass(m, w)?,
                anchor_mass: anchor_mass(m)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDump {
    pub layer: usize,
    /// `heads[h][row][col]`
    pub heads: Vec<Vec<Vec<f64>>>,
}

/// Contents of `attention_dump.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub schema_version: u32,
    pub chain_len: usize,
    pub layers: Vec<LayerDump>,
}

impl AttentionDump {
    pub fn from_maps(maps: &[Tensor]) -> Result<Self> {
        let mut chain_len = 0;
        let mut layers = Vec::with_capacity(maps.len());
        for (layer, m) in maps.iter().enumerate() {
            let (h, n) = check(m)?;
            chain_len = n;
            let d = m.data();
            let heads = (0..h)
                .map(|k| (0..n).map(|i| d[(k * n + i) * n..(k * n + i + 1) * n].to_vec()).collect())
                .collect();
            layers.push(LayerDump { layer, heads });
        }
        Ok(Self {
            schema_version: super::SCHEMA_VERSION,
            chain_len,
            layers,
        })
    }

    pub fn to_maps(&self) -> Result<Vec<Tensor>> {
        self.layers
            .iter()
            .map(|l| {
                let h = l.heads.len();
                let data: Vec<f64> = l.heads.iter().flatten().flatten().copied().collect();
                Ok(Tensor::new(vec![h, self.chain_len, self.chain_len], data)?)
            })
            .collect()
    }
}
