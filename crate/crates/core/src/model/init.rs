use coa_autodiff::{trunc_normal, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{ModelConfig, ObsSpec};

const INIT_STD: f64 = 0.02;

enum Init {
    Normal,
    Zeros,
    Ones,
}

struct Layout {
    entries: Vec<(String, Vec<usize>, Init)>,
}

impl Layout {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.entries.push((name, shape, init));
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.push(format!("{prefix}.w"), vec![fan_in, fan_out], Init::Normal);
        self.push(format!("{prefix}.b"), vec![fan_out], Init::Zeros);
    }

    fn norm(&mut self, prefix: &str, d: usize) {
        self.push(format!("{prefix}.g"), vec![d], Init::Ones);
        self.push(format!("{prefix}.b"), vec![d], Init::Zeros);
    }

    fn attention(&mut self, prefix: &str, d: usize) {
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{prefix}.{p}"), d, d);
        }
    }

    fn feedforward(&mut self, prefix: &str, d: usize, ff: usize) {
        self.linear(&format!("{prefix}.ff1"), d, ff);
        self.linear(&format!("{prefix}.ff2"), ff, d);
    }
}

/// Every parameter's name, shape and initializer, in sampling order.
///
/// The refinement heads come last so that configs differing only in head
/// count share all other weights for the same seed.
fn layout(cfg: &ModelConfig) -> Layout {
    let d = cfg.d_model;
    let mut l = Layout { entries: Vec::new() };
    match &cfg.obs {
        ObsSpec::State { groups } => {
            for (i, &s) in groups.iter().enumerate() {
                l.linear(&format!("enc.obs.{i}"), s, d);
            }
        }
        ObsSpec::Raster { patch, proprio, .. } => {
            l.linear("enc.patch", patch * patch, d);
            l.linear("enc.proprio", *proprio, d);
        }
    }
    l.push("enc.pos".into(), vec![cfg.obs.n_tokens(), d], Init::Normal);
    for i in 0..cfg.enc_layers {
        let p = format!("enc.{i}");
        l.norm(&format!("{p}.ln1"), d);
        l.attention(&format!("{p}.attn"), d);
        l.norm(&format!("{p}.ln2"), d);
        l.feedforward(&p, d, cfg.d_ff);
    }
    l.norm("enc.ln", d);
    l.push("dec.boc".into(), vec![1, d], Init::Normal);
    l.push("dec.pos".into(), vec![cfg.positions(), d], Init::Normal);
    for i in 0..cfg.dec_layers {
        let p = format!("dec.{i}");
        l.norm(&format!("{p}.ln1"), d);
        l.attention(&format!("{p}.self"), d);
        l.norm(&format!("{p}.ln2"), d);
        l.attention(&format!("{p}.cross"), d);
        l.norm(&format!("{p}.ln3"), d);
        l.feedforward(&p, d, cfg.d_ff);
    }
    l.norm("dec.ln", d);
    l.linear("act.enc", cfg.action_dim, d);
    l.linear("act.dec", d, cfg.action_dim);
    l.linear("stop", d, 1);
    for h in 1..=cfg.mtp_heads {
        let p = format!("mtp.{h}");
        l.norm(&format!("{p}.ln"), d);
        l.feedforward(&p, d, cfg.d_ff);
    }
    l
}

/// Truncated-normal (std 0.02) weights and embeddings, zero biases and
/// norm shifts, unit norm scales.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape, init) in layout(cfg).entries {
        let t = match init {
            Init::Normal => trunc_normal(&mut rng, &shape, INIT_STD),
            Init::Zeros => Tensor::zeros(&shape),
            Init::Ones => Tensor::full(&shape, 1.0),
        };
        store.insert(name, t)?;
    }
    Ok(store)
}

/// Names and shapes a parameter store for `cfg` must have, in sampling order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    layout(cfg).entries.into_iter().map(|(n, s, _)| (n, s)).collect()
}
