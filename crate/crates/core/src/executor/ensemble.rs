//! Temporal ensembling over chains generated at successive steps.

use std::collections::VecDeque;

use crate::dataset::{ActionLayout, Ordering};
use crate::error::{CoaError, Result};

/// A chain generated at env step `t`, tokens in generation order.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleEntry {
    pub t: usize,
    pub ordering: Ordering,
    pub tokens: Vec<Vec<f64>>,
}

impl EnsembleEntry {
    pub fn new(t: usize, ordering: Ordering, tokens: Vec<Vec<f64>>) -> Result<Self> {
        let min = match ordering {
            Ordering::Hybrid | Ordering::ChunkKf => 2,
            _ => 1,
        };
        if tokens.len() < min {
            return Err(CoaError::Model(format!(
                "{ordering} chain needs at least {min} tokens, got {}",
                tokens.len()
            )));
        }
        Ok(Self { t, ordering, tokens })
    }

    /// Implied terminal step `t + N` of a reverse chain.
    pub fn terminal(&self) -> usize {
        self.t + self.tokens.len()
    }

    /// Token for env step `s`: tail-aligned for reverse chains, head-aligned
    /// (in execution order) otherwise.
    pub fn aligned(&self, s: usize) -> Option<&[f64]> {
        match self.ordering {
            Ordering::Reverse => tail_align(self, s),
            _ => head_align(self, s),
        }
    }

    /// The action this chain proposes for the step right after generation.
    pub fn next_action(&self) -> &[f64] {
        self.aligned(self.t + 1).expect("validated chains cover t + 1")
    }
}

/// Token at index `T − s` of a reverse chain, when `s` lies in
/// `[t + 1, T]`. Index 0 is the keyframe at time `T`.
pub fn tail_align(entry: &EnsembleEntry, s: usize) -> Option<&[f64]> {
    let idx = entry.terminal().checked_sub(s)?;
    entry.tokens.get(idx).map(Vec::as_slice)
}

/// Token `s − t − 1` of the chain in execution order.
pub fn head_align(entry: &EnsembleEntry, s: usize) -> Option<&[f64]> {
    let j = s.checked_sub(entry.t + 1)?;
    let toks = &entry.tokens;
    match entry.ordering {
        Ordering::Reverse => toks.len().checked_sub(j + 1).map(|i| toks[i].as_slice()),
        Ordering::Forward | Ordering::Chunk => toks.get(j).map(Vec::as_slice),
        // Keyframe first, then the forward chain; the keyframe closes it.
        Ordering::Hybrid => toks[1..].iter().chain(&toks[..1]).nth(j).map(Vec::as_slice),
        Ordering::ChunkKf => toks[..toks.len() - 1].get(j).map(Vec::as_slice),
    }
}

/// Recent chains of one episode, oldest first.
#[derive(Clone, Debug)]
pub struct EnsembleBuffer {
    entries: VecDeque<EnsembleEntry>,
    pub m: f64,
    pub k: usize,
    pub layout: ActionLayout,
}

impl EnsembleBuffer {
    pub fn new(m: f64, k: usize, layout: ActionLayout) -> Result<Self> {
        if !(m >= 0.0) || k == 0 {
            return Err(CoaError::Config(format!("ensemble needs m >= 0 and k >= 1, got m={m}, k={k}")));
        }
        Ok(Self {
            entries: VecDeque::new(),
            m,
            k,
            layout,
        })
    }

    /// Appends a chain, evicting the oldest beyond `k`.
    pub fn push(&mut self, entry: EnsembleEntry) -> Result<()> {
        if let Some(last) = self.entries.back() {
            if entry.t < last.t {
                return Err(CoaError::Model(format!(
                    "chain from step {} pushed after step {}",
                    entry.t, last.t
                )));
            }
        }
        if entry.tokens.iter().any(|a| a.len() != self.layout.dim()) {
            return Err(CoaError::Model(format!("token dimension differs from {}", self.layout.dim())));
        }
        self.entries.push_back(entry);
        while self.entries.len() > self.k {
            self.entries.pop_front();
        }
        Ok(())
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &EnsembleEntry> {
        self.entries.iter()
    }

    pub fn newest(&self) -> Option<&EnsembleEntry> {
        self.entries.back()
    }

    /// Normalized weights `∝ exp(−m (s − 1 − t_i))` of the entries aligned
    /// at `s`, with their tokens.
    pub fn contributions(&self, s: usize) -> Vec<(f64, &[f64])> {
        let aligned: Vec<(usize, &[f64])> = self
            .entries
            .iter()
            .filter_map(|e| e.aligned(s).map(|a| (e.t, a)))
            .collect();
        // Ages relative to the newest contributor keep exp() in range.
        let newest = aligned.iter().map(|&(t, _)| t).max().unwrap_or(0);
        let raw: Vec<f64> = aligned
            .iter()
            .map(|&(t, _)| (-self.m * (newest - t) as f64).exp())
            .collect();
        let z: f64 = raw.iter().sum();
        aligned.into_iter().zip(raw).map(|((_, a), w)| (w / z, a)).collect()
    }
}

/// Weighted mean of the tokens aligned at `s`. Quaternions are flipped into
/// the hemisphere of the highest-weight contributor before averaging.
pub fn ensemble_next_action(buffer: &EnsembleBuffer, s: usize) -> Result<Vec<f64>> {
    let parts = buffer.contributions(s);
    if parts.is_empty() {
        return Err(CoaError::NoAlignedEntry(s));
    }
    let quat = buffer.layout.quaternion();
    let lead = parts
        .iter()
        .enumerate()
        .fold(0, |best, (i, p)| if p.0 > parts[best].0 { i } else { best });
    let reference = parts[lead].1;
    let mut out = vec![0.0; reference.len()];
    for (n, &(w, a)) in parts.iter().enumerate() {
        let flip = quat.clone().is_some_and(|q| a[q.clone()].iter().zip(&reference[q]).map(|(x, y)| x * y).sum::<f64>() < 0.0);
        for (i, (o, &v)) in out.iter_mut().zip(a).enumerate() {
            let v = if flip && quat.as_ref().is_some_and(|q| q.contains(&i)) { -v } else { v };
            // The first term is assigned so a lone entry passes through
            // bit for bit (including signed zeros).
            if n == 0 {
                *o = w * v;
            } else {
                *o += w * v;
            }
        }
    }
    Ok(out)
}
