use coa_autodiff::{sigmoid, Tensor};

use crate::dataset::{NormStats, Ordering};
use crate::error::{CoaError, Result};
use crate::model::{Forward, LatentFeed, Policy, StopRule};

/// Per-call inputs beyond the observation.
#[derive(Clone, Copy, Debug, Default)]
pub struct GenerateContext<'a> {
    /// Current end-effector position (workspace units), for the proximity rule.
    pub ee_xy: Option<[f64; 2]>,
    /// Statistics to map decoded actions back to workspace units.
    pub stats: Option<&'a NormStats>,
}

/// A generated chain in generation order (normalized action space).
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedChain {
    pub ordering: Ordering,
    pub tokens: Vec<Vec<f64>>,
    /// Continuation probability at each emitted position (0 for chunks).
    pub stop_probs: Vec<f64>,
    /// Decoder self-attention of the final pass, `[heads, n, n]` per layer.
    pub attention: Vec<Tensor>,
}

impl GeneratedChain {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Actions in execution order, starting with the next one to execute.
    pub fn time_ordered(&self) -> Vec<Vec<f64>> {
        match self.ordering {
            Ordering::Reverse => self.tokens.iter().rev().cloned().collect(),
            Ordering::Forward | Ordering::Chunk => self.tokens.clone(),
            Ordering::Hybrid => self.tokens[1..]
                .iter()
                .chain(std::iter::once(&self.tokens[0]))
                .cloned()
                .collect(),
            Ordering::ChunkKf => self.tokens[..self.tokens.len() - 1].to_vec(),
        }
    }
}

fn row(t: &Tensor, r: usize) -> Vec<f64> {
    t.row(r).to_vec()
}

impl Policy {
    /// Greedy chain generation for one prepared observation.
    ///
    /// Chunk orderings decode every position in a single parallel pass.
    /// Other orderings decode position by position, feeding back the head-1
    /// latent (or its re-encoded action), until the stop rule fires or the
    /// chain reaches `max_len`.
    pub fn generate_chain(&self, obs: &[f64], ctx: &GenerateContext) -> Result<GeneratedChain> {
        let cfg = &self.config;
        let mut fwd = Forward::new(self, None);
        let (memory, segs) = fwd.encode(&[obs])?;
        let boc = fwd.param("dec.boc")?;
        if cfg.ordering.is_chunked() {
            let n = cfg.ordering.capacity(cfg.max_len);
            let inputs = fwd.g.embedding(boc, &vec![0; n])?;
            let out = fwd.decode(memory, &segs, inputs, &[n], false)?;
            let acts = fwd.g.value(out.head_actions[0]);
            return Ok(GeneratedChain {
                ordering: cfg.ordering,
                tokens: (0..n).map(|r| row(acts, r)).collect(),
                stop_probs: vec![0.0; n],
                attention: fwd.attention_maps(&out, 0),
            });
        }
        if let StopRule::Proximity { .. } = cfg.stop_rule {
            if ctx.ee_xy.is_none() || ctx.stats.is_none() {
                return Err(CoaError::Model(
                    "proximity stopping needs the end-effector position and normalization stats".into(),
                ));
            }
        }
        let d = cfg.d_model;
        let mut feed: Vec<f64> = Vec::new();
        let mut tokens = Vec::new();
        let mut stop_probs = Vec::new();
        let mut attention = Vec::new();
        for j in 0..cfg.max_len {
            let inputs = if j == 0 {
                boc
            } else {
                let prev = fwd.g.constant(Tensor::new(vec![j, d], feed.clone())?);
                fwd.g.concat_rows(&[boc, prev])?
            };
            let out = fwd.decode(memory, &segs, inputs, &[j + 1], true)?;
            let z = row(fwd.g.value(out.head_latents[0]), j);
            let act = row(fwd.g.value(out.head_actions[0]), j);
            let p_stop = sigmoid(fwd.g.value(out.stop_logits).at2(j, 0));
            if !z.iter().chain(&act).all(|v| v.is_finite()) {
                return Err(CoaError::Model(format!("non-finite latent at chain position {j}")));
            }
            attention = fwd.attention_maps(&out, 0);
            let stop = match cfg.stop_rule {
                StopRule::Head => p_stop > 0.5,
                StopRule::Proximity { eps } => {
                    let (ee, stats) = (ctx.ee_xy.unwrap_or_default(), ctx.stats.expect("checked above"));
                    let phys = stats.denormalize_action(&act);
                    ((phys[0] - ee[0]).powi(2) + (phys[1] - ee[1]).powi(2)).sqrt() < eps
                }
            };
            match cfg.feed {
                LatentFeed::Latent => feed.extend_from_slice(&z),
                LatentFeed::Reencode => {
                    let a = fwd.g.constant(Tensor::new(vec![1, act.len()], act.clone())?);
                    let e = fwd.linear(a, "act.enc")?;
                    feed.extend_from_slice(fwd.g.value(e).data());
                }
            }
            tokens.push(act);
            stop_probs.push(p_stop);
            if stop {
                break;
            }
        }
        Ok(GeneratedChain {
            ordering: cfg.ordering,
            tokens,
            stop_probs,
            attention,
        })
    }
}
