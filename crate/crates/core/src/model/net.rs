//! Forward pass of the encoder–decoder over a packed batch.
//!
//! Samples are stacked along the row axis so every projection is one large
//! matrix product; attention sees per-sample row segments.

use coa_autodiff::rng::derive_key;
use coa_autodiff::{AttnLayout, Binder, Graph, Tensor, Var};

use crate::dataset::ChainTarget;
use crate::error::{CoaError, Result};
use crate::model::{ModelConfig, ObsSpec, Policy};

/// One recorded forward pass. Holds the graph, the bound parameters and
/// the dropout stream.
pub struct Forward<'p> {
    pub g: Graph,
    binder: Binder<'p>,
    pub(crate) cfg: &'p ModelConfig,
    dropout_key: Option<u64>,
    site: u64,
}

/// Decoder results for a packed batch. Rows of sample `b` are
/// `offsets[b] .. offsets[b] + lens[b]`.
#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub lens: Vec<usize>,
    pub offsets: Vec<usize>,
    /// Trunk output `[rows, d]`.
    pub trunk: Var,
    /// Refined latent per head, `[rows, d]` each; head 1 first.
    pub head_latents: Vec<Var>,
    /// Decoded action per head, `[rows, A]` each.
    pub head_actions: Vec<Var>,
    /// Continuation logits from the head-1 latent, `[rows, 1]`.
    pub stop_logits: Var,
    /// Self-attention node per decoder layer.
    pub self_attn: Vec<Var>,
}

/// Action-encoder embeddings of the teacher-forced tokens, row-aligned with
/// the decoder output.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub tokens: Var,
    pub embedded: Var,
}

fn offsets(lens: &[usize]) -> Vec<usize> {
    lens.iter()
        .scan(0, |acc, &l| {
            let o = *acc;
            *acc += l;
            Some(o)
        })
        .collect()
}

impl<'p> Forward<'p> {
    /// `training` carries `(seed, step)` for dropout; `None` runs in
    /// inference mode.
    pub fn new(policy: &'p Policy, training: Option<(u64, u64)>) -> Self {
        Self::with_graph(policy, Graph::with_training(training.is_some()), training)
    }

    /// Continues recording on an existing graph (its mode is kept).
    pub fn with_graph(policy: &'p Policy, g: Graph, training: Option<(u64, u64)>) -> Self {
        Self {
            g,
            binder: Binder::new(&policy.params),
            cfg: &policy.config,
            dropout_key: training.map(|(seed, step)| derive_key(&[0xd0, seed, step])),
            site: 0,
        }
    }

    pub fn into_graph(self) -> Graph {
        self.g
    }

    /// Substitutes an existing node for parameter `name`.
    pub fn bind_param(&mut self, name: &str, v: Var) -> Result<()> {
        Ok(self.binder.bind_var(name, v)?)
    }

    pub fn binder(&self) -> &Binder<'p> {
        &self.binder
    }

    /// Binds all parameters so each gets a gradient entry.
    pub fn bind_all(&mut self) {
        self.binder.bind_all(&mut self.g);
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        Ok(self.binder.param(&mut self.g, name)?)
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        self.site += 1;
        match self.dropout_key {
            Some(k) if self.cfg.dropout > 0.0 => Ok(self.g.dropout(x, self.cfg.dropout, derive_key(&[k, self.site]))?),
            _ => Ok(x),
        }
    }

    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        Ok(self.g.linear(x, w, Some(b))?)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gam = self.param(&format!("{prefix}.g"))?;
        let bet = self.param(&format!("{prefix}.b"))?;
        Ok(self.g.layer_norm(x, gam, bet)?)
    }

    fn feedforward(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.ff1"))?;
        let h = self.g.gelu(h)?;
        let h = self.dropout(h)?;
        self.linear(h, &format!("{prefix}.ff2"))
    }

    fn attention(&mut self, xq: Var, xkv: Var, prefix: &str, layout: &AttnLayout) -> Result<(Var, Var)> {
        let q = self.linear(xq, &format!("{prefix}.q"))?;
        let k = self.linear(xkv, &format!("{prefix}.k"))?;
        let v = self.linear(xkv, &format!("{prefix}.v"))?;
        let a = self.g.attention(q, k, v, layout)?;
        Ok((self.linear(a, &format!("{prefix}.o"))?, a))
    }

    fn residual(&mut self, x: Var, branch: Var) -> Result<Var> {
        let b = self.dropout(branch)?;
        Ok(self.g.add(x, b)?)
    }

    /// Encodes prepared observation inputs into memory tokens; returns the
    /// packed memory `[B · tokens, d]` and its per-sample row segments.
    pub fn encode(&mut self, obs: &[&[f64]]) -> Result<(Var, Vec<(usize, usize)>)> {
        let cfg = self.cfg;
        let bsz = obs.len();
        if bsz == 0 {
            return Err(CoaError::Model("empty observation batch".into()));
        }
        let want = cfg.obs.input_dim();
        if let Some(o) = obs.iter().find(|o| o.len() != want) {
            return Err(CoaError::Model(format!(
                "observation has {} values, the encoder expects {want}",
                o.len()
            )));
        }
        let n = cfg.obs.n_tokens();
        // Embedded tokens in some block order, plus the gather ids that put
        // them in sample-major order.
        let (stacked, ids) = match &cfg.obs {
            ObsSpec::State { groups } => {
                let mut parts = Vec::with_capacity(groups.len());
                let mut off = 0;
                for (gi, &s) in groups.iter().enumerate() {
                    let data: Vec<f64> = obs.iter().flat_map(|o| o[off..off + s].iter().copied()).collect();
                    let x = self.g.constant(Tensor::new(vec![bsz, s], data)?);
                    parts.push(self.linear(x, &format!("enc.obs.{gi}"))?);
                    off += s;
                }
                let ids: Vec<usize> = (0..bsz).flat_map(|b| (0..groups.len()).map(move |t| t * bsz + b)).collect();
                (self.g.concat_rows(&parts)?, ids)
            }
            ObsSpec::Raster { size, patch, proprio } => {
                let (size, patch) = (*size, *patch);
                let per_side = size / patch;
                let np = per_side * per_side;
                let mut pix = Vec::with_capacity(bsz * size * size);
                for o in obs {
                    for pr in 0..per_side {
                        for pc in 0..per_side {
                            for r in 0..patch {
                                let row = (pr * patch + r) * size + pc * patch;
                                pix.extend_from_slice(&o[row..row + patch]);
                            }
                        }
                    }
                }
                let px = self.g.constant(Tensor::new(vec![bsz * np, patch * patch], pix)?);
                let pe = self.linear(px, "enc.patch")?;
                let prop: Vec<f64> = obs.iter().flat_map(|o| o[size * size..].iter().copied()).collect();
                let pp = self.g.constant(Tensor::new(vec![bsz, *proprio], prop)?);
                let pr = self.linear(pp, "enc.proprio")?;
                let ids = (0..bsz)
                    .flat_map(|b| (0..np).map(move |t| b * np + t).chain(std::iter::once(bsz * np + b)))
                    .collect();
                (self.g.concat_rows(&[pe, pr])?, ids)
            }
        };
        let tokens = self.g.embedding(stacked, &ids)?;
        let pos_ids: Vec<usize> = (0..bsz).flat_map(|_| 0..n).collect();
        let pos_table = self.param("enc.pos")?;
        let pos = self.g.embedding(pos_table, &pos_ids)?;
        let mut x = self.g.add(tokens, pos)?;
        x = self.dropout(x)?;
        let layout = AttnLayout::packed(cfg.heads, &vec![n; bsz], false);
        for i in 0..cfg.enc_layers {
            let h = self.norm(x, &format!("enc.{i}.ln1"))?;
            let (a, _) = self.attention(h, h, &format!("enc.{i}.attn"), &layout)?;
            x = self.residual(x, a)?;
            let h = self.norm(x, &format!("enc.{i}.ln2"))?;
            let f = self.feedforward(h, &format!("enc.{i}"))?;
            x = self.residual(x, f)?;
        }
        let mem = self.norm(x, "enc.ln")?;
        Ok((mem, layout.keys))
    }

    /// Adds learned position embeddings to decoder inputs laid out with
    /// `lens` rows per sample.
    fn with_positions(&mut self, inputs: Var, lens: &[usize]) -> Result<Var> {
        let ids: Vec<usize> = lens.iter().flat_map(|&l| 0..l).collect();
        if let Some(&m) = ids.iter().max() {
            if m >= self.cfg.positions() {
                return Err(CoaError::Model(format!(
                    "decoder position {m} exceeds the {} learned positions",
                    self.cfg.positions()
                )));
            }
        }
        let table = self.param("dec.pos")?;
        let pos = self.g.embedding(table, &ids)?;
        Ok(self.g.add(inputs, pos)?)
    }

    /// Runs the decoder trunk and the refinement heads. `inputs` holds the
    /// per-position input embeddings (without positions).
    pub fn decode(
        &mut self,
        memory: Var,
        mem_segs: &[(usize, usize)],
        inputs: Var,
        lens: &[usize],
        causal: bool,
    ) -> Result<DecoderOutput> {
        let cfg = self.cfg;
        if lens.len() != mem_segs.len() {
            return Err(CoaError::Model(format!(
                "{} chains for {} observations",
                lens.len(),
                mem_segs.len()
            )));
        }
        let mut x = self.with_positions(inputs, lens)?;
        x = self.dropout(x)?;
        let self_layout = AttnLayout::packed(cfg.heads, lens, causal);
        let cross_layout = AttnLayout {
            heads: cfg.heads,
            queries: self_layout.queries.clone(),
            keys: mem_segs.to_vec(),
            causal: false,
        };
        let mut self_attn = Vec::with_capacity(cfg.dec_layers);
        for i in 0..cfg.dec_layers {
            let h = self.norm(x, &format!("dec.{i}.ln1"))?;
            let (a, probs) = self.attention(h, h, &format!("dec.{i}.self"), &self_layout)?;
            self_attn.push(probs);
            x = self.residual(x, a)?;
            let h = self.norm(x, &format!("dec.{i}.ln2"))?;
            let (c, _) = self.attention(h, memory, &format!("dec.{i}.cross"), &cross_layout)?;
            x = self.residual(x, c)?;
            let h = self.norm(x, &format!("dec.{i}.ln3"))?;
            let f = self.feedforward(h, &format!("dec.{i}"))?;
            x = self.residual(x, f)?;
        }
        let trunk = self.norm(x, "dec.ln")?;
        let mut head_latents = Vec::with_capacity(cfg.mtp_heads);
        let mut head_actions = Vec::with_capacity(cfg.mtp_heads);
        for h in 1..=cfg.mtp_heads {
            let n = self.norm(trunk, &format!("mtp.{h}.ln"))?;
            let f = self.feedforward(n, &format!("mtp.{h}"))?;
            let z = self.g.add(trunk, f)?;
            head_actions.push(self.linear(z, "act.dec")?);
            head_latents.push(z);
        }
        let stop_logits = self.linear(head_latents[0], "stop")?;
        Ok(DecoderOutput {
            lens: lens.to_vec(),
            offsets: offsets(lens),
            trunk,
            head_latents,
            head_actions,
            stop_logits,
            self_attn,
        })
    }

    /// Teacher-forced decode of `targets`. Variable-length chains use only
    /// their real tokens unless `padded`, in which case every chain runs at
    /// full capacity. Chunk orderings always run at full capacity.
    pub fn teacher_forced(
        &mut self,
        memory: Var,
        mem_segs: &[(usize, usize)],
        targets: &[&ChainTarget],
        padded: bool,
    ) -> Result<(DecoderOutput, TokenBatch)> {
        let cfg = self.cfg;
        let first = targets
            .first()
            .ok_or_else(|| CoaError::Model("empty target batch".into()))?;
        let ordering = first.ordering;
        if targets.iter().any(|t| t.ordering != ordering) {
            return Err(CoaError::Model("mixed orderings in one batch".into()));
        }
        if ordering != cfg.ordering {
            return Err(CoaError::Model(format!(
                "targets use {ordering} ordering, model is configured for {}",
                cfg.ordering
            )));
        }
        let chunked = ordering.is_chunked();
        let lens: Vec<usize> = targets
            .iter()
            .map(|t| if padded || chunked { t.capacity() } else { t.valid_len() })
            .collect();
        if lens.contains(&0) {
            return Err(CoaError::Model("target without any real token".into()));
        }
        let a = cfg.action_dim;
        let mut tok = Vec::with_capacity(lens.iter().sum::<usize>() * a);
        for (t, &l) in targets.iter().zip(&lens) {
            for row in &t.tokens[..l] {
                if row.len() != a {
                    return Err(CoaError::Model(format!("token of dim {} for action dim {a}", row.len())));
                }
                tok.extend_from_slice(row);
            }
        }
        let rows = tok.len() / a;
        let tokens = self.g.constant(Tensor::new(vec![rows, a], tok)?);
        let embedded = self.linear(tokens, "act.enc")?;
        let boc = self.param("dec.boc")?;
        let inputs = if chunked {
            self.g.embedding(boc, &vec![0; rows])?
        } else {
            let table = self.g.concat_rows(&[boc, embedded])?;
            let ids: Vec<usize> = offsets(&lens)
                .into_iter()
                .zip(&lens)
                .flat_map(|(o, &l)| std::iter::once(0).chain((0..l - 1).map(move |j| 1 + o + j)))
                .collect();
            self.g.embedding(table, &ids)?
        };
        let out = self.decode(memory, mem_segs, inputs, &lens, !chunked)?;
        Ok((out, TokenBatch { tokens, embedded }))
    }

    /// Self-attention maps of sample `b`, one `[heads, n, n]` tensor per layer.
    pub fn attention_maps(&self, out: &DecoderOutput, b: usize) -> Vec<Tensor> {
        out.self_attn
            .iter()
            .filter_map(|&v| self.g.attention_probs(v).map(|mut segs| segs.swap_remove(b)))
            .collect()
    }
}
