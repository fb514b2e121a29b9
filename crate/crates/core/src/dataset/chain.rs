use serde::{Deserialize, Serialize};

use crate::dataset::Demonstration;
use crate::error::{CoaError, Result};

/// Fixed window length of the chunked baselines.
pub const CHUNK_LEN: usize = 20;

/// Order in which the future actions of an episode are laid out as tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ordering {
    /// `[a_T, a_{T-1}, …, a_{t+1}]`: keyframe first, back toward the present.
    Reverse,
    /// `[a_{t+1}, …, a_T]`
    Forward,
    /// `[a_T, a_{t+1}, …, a_{T-1}]`: keyframe, then forward.
    Hybrid,
    /// `[a_{t+1}, …, a_{t+20}]`, decoded in parallel.
    Chunk,
    /// `Chunk` plus `a_T` as a 21st token.
    ChunkKf,
}

impl Ordering {
    pub const ALL: [Ordering; 5] = [
        Ordering::Reverse,
        Ordering::Forward,
        Ordering::Hybrid,
        Ordering::Chunk,
        Ordering::ChunkKf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ordering::Reverse => "reverse",
            Ordering::Forward => "forward",
            Ordering::Hybrid => "hybrid",
            Ordering::Chunk => "chunk",
            Ordering::ChunkKf => "chunk_kf",
        }
    }

    /// Chunk orderings have a fixed length and no stop token.
    pub fn is_chunked(self) -> bool {
        matches!(self, Ordering::Chunk | Ordering::ChunkKf)
    }

    /// Token capacity for a model with maximum chain length `l`.
    pub fn capacity(self, l: usize) -> usize {
        match self {
            Ordering::Chunk => CHUNK_LEN,
            Ordering::ChunkKf => CHUNK_LEN + 1,
            _ => l,
        }
    }
}

impl std::fmt::Display for Ordering {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Ordering {
    type Err = CoaError;

    fn from_str(s: &str) -> Result<Self> {
        Ordering::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| CoaError::Config(format!("unknown ordering {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyframeMode {
    #[default]
    LastAction,
    GripperChange,
}

/// Index (into `demo.steps`) of the keyframe action.
///
/// `GripperChange` picks the last step whose gripper value differs in sign
/// from the previous action's, falling back to the final step.
pub fn keyframe_index(demo: &Demonstration, mode: KeyframeMode) -> usize {
    let last = demo.len() - 1;
    match mode {
        KeyframeMode::LastAction => last,
        KeyframeMode::GripperChange => {
            let g = |k: usize| {
                let a = demo.action(k);
                a[a.len() - 1] >= 0.0
            };
            (1..demo.len()).rev().find(|&k| g(k) != g(k - 1)).unwrap_or(last)
        }
    }
}

pub fn extract_keyframe(demo: &Demonstration, mode: KeyframeMode) -> Vec<f64> {
    demo.action(keyframe_index(demo, mode)).to_vec()
}

/// Training target for one `(demo, t)` pair.
///
/// `tokens` is padded with zero vectors to the ordering's capacity; `mask`
/// marks real tokens. For variable-length orderings the mask is a prefix and
/// `stop` has exactly one 1. For `ChunkKf` the keyframe always sits at index
/// 20, after the (possibly partially masked) chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainTarget {
    pub ordering: Ordering,
    pub tokens: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
    pub stop: Vec<f64>,
    pub keyframe: Vec<f64>,
    /// Number of refinement heads the offset views are built for.
    pub heads: usize,
    /// Step index of `tokens[i]` (1-based time, `a_s`), 0 for padding.
    pub times: Vec<usize>,
}

impl ChainTarget {
    pub fn capacity(&self) -> usize {
        self.tokens.len()
    }

    /// Number of real tokens.
    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Token index targeted by head `h` (1-based) at position `j`, if both
    /// the position and the target are real tokens.
    pub fn mtp_target(&self, h: usize, j: usize) -> Option<usize> {
        if h == 0 || h > self.heads || j >= self.capacity() || !self.mask[j] {
            return None;
        }
        let k = j + h - 1;
        (k < self.capacity() && self.mask[k]).then_some(k)
    }

    /// Index of the stop token, for variable-length orderings.
    pub fn stop_index(&self) -> Option<usize> {
        self.stop.iter().position(|&s| s == 1.0)
    }
}

/// Target with the keyframe taken as the demo's final action.
pub fn build_chain_target(demo: &Demonstration, t: usize, ordering: Ordering, l: usize, h: usize) -> Result<ChainTarget> {
    build_chain_target_with(demo, t, ordering, l, h, KeyframeMode::LastAction)
}

/// Builds the target for step `t` (0-based; the chain starts at `a_{t+1}`).
///
/// With `KeyframeMode::GripperChange` the chain ends at the keyframe step
/// when that step is still ahead of `t`, otherwise at the final action.
pub fn build_chain_target_with(
    demo: &Demonstration,
    t: usize,
    ordering: Ordering,
    l: usize,
    h: usize,
    mode: KeyframeMode,
) -> Result<ChainTarget> {
    let n = demo.len();
    if t >= n {
        return Err(CoaError::ChainTarget(format!("step {t} is outside an episode of length {n}")));
    }
    if h == 0 {
        return Err(CoaError::ChainTarget("need at least one head".into()));
    }
    let end = match keyframe_index(demo, mode) {
        k if k >= t => k,
        _ => n - 1,
    };
    let cap = ordering.capacity(l);
    if !ordering.is_chunked() && end + 1 > l + t {
        return Err(CoaError::ChainTarget(format!(
            "chain of {} tokens exceeds maximum length {l}",
            end + 1 - t
        )));
    }
    // Indices into demo.steps in token order.
    let idx: Vec<Option<usize>> = match ordering {
        Ordering::Reverse => (t..=end).rev().map(Some).collect(),
        Ordering::Forward => (t..=end).map(Some).collect(),
        Ordering::Hybrid => std::iter::once(end).chain(t..end).map(Some).collect(),
        Ordering::Chunk | Ordering::ChunkKf => {
            let mut v: Vec<_> = (t..t + CHUNK_LEN).map(|k| (k < n).then_some(k)).collect();
            if ordering == Ordering::ChunkKf {
                v.push(Some(n - 1));
            }
            v
        }
    };
    let dim = demo.action(0).len();
    let mut tokens = vec![vec![0.0; dim]; cap];
    let mut mask = vec![false; cap];
    let mut times = vec![0; cap];
    for (i, k) in idx.iter().enumerate() {
        if let Some(k) = *k {
            tokens[i] = demo.action(k).to_vec();
            mask[i] = true;
            times[i] = k + 1;
        }
    }
    let mut stop = vec![0.0; cap];
    if !ordering.is_chunked() {
        stop[idx.len() - 1] = 1.0;
    }
    Ok(ChainTarget {
        ordering,
        tokens,
        mask,
        stop,
        keyframe: demo.action(end).to_vec(),
        heads: h,
        times,
    })
}
