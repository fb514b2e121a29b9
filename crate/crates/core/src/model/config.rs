use serde::{Deserialize, Serialize};

use crate::dataset::Ordering;
use crate::error::{CoaError, Result};
use crate::sim::T_MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Paper,
    Desk,
}

impl std::str::FromStr for Profile {
    type Err = CoaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(CoaError::Config(format!("unknown profile {other:?} (expected paper or desk)"))),
        }
    }
}

/// What the auxiliary latent term supervises.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// MSE between the base-head latent and the action encoder's embedding
    /// of the target token.
    #[default]
    LatentConsistency,
    /// L1 between a token and its own encode–decode round trip.
    ActionReconstruction,
}

/// What is fed back as the next decoder input during generation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentFeed {
    /// The base-head latent itself.
    #[default]
    Latent,
    /// The action encoder applied to the decoded action.
    Reencode,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StopRule {
    /// Stop once the continuation head's probability exceeds 0.5.
    Head,
    /// Stop once a decoded position lies within `eps` of the current end
    /// effector (workspace units).
    Proximity { eps: f64 },
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule::Head
    }
}

/// How observations are tokenized for the encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ObsSpec {
    /// One token per contiguous group of the state vector.
    State { groups: Vec<usize> },
    /// A `size × size` image cut into `patch × patch` tiles plus one token
    /// for the first `proprio` state entries.
    Raster { size: usize, patch: usize, proprio: usize },
}

impl ObsSpec {
    pub fn input_dim(&self) -> usize {
        match self {
            ObsSpec::State { groups } => groups.iter().sum(),
            ObsSpec::Raster { size, proprio, .. } => size * size + proprio,
        }
    }

    pub fn n_tokens(&self) -> usize {
        match self {
            ObsSpec::State { groups } => groups.len(),
            ObsSpec::Raster { size, patch, .. } => (size / patch) * (size / patch) + 1,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            ObsSpec::State { groups } if groups.is_empty() || groups.contains(&0) => {
                Err(CoaError::Config("state groups must be non-empty and positive".into()))
            }
            ObsSpec::Raster { size, patch, proprio } if *patch == 0 || size % patch != 0 || *proprio == 0 => Err(
                CoaError::Config(format!("raster {size} does not tile into {patch}-pixel patches")),
            ),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub act: f64,
    pub lat: f64,
    pub stop: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            act: 1.0,
            lat: 1.0,
            stop: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub enabled: bool,
    /// Recency coefficient `m` of the `exp(-m · age)` weights.
    pub m: f64,
    /// Maximum number of retained chains.
    pub k: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            m: 0.01,
            k: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub ordering: Ordering,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub mtp_heads: usize,
    pub max_len: usize,
    pub action_dim: usize,
    pub obs: ObsSpec,
    pub loss_weights: LossWeights,
    pub loss_variant: LossVariant,
    pub feed: LatentFeed,
    pub stop_rule: StopRule,
    pub ensemble: EnsembleConfig,
}

impl ModelConfig {
    /// Full-size settings: 4 encoder layers, 6 trunk layers plus the
    /// multi-token layer, 8 heads, width 512, feedforward 3200, dropout 0.1,
    /// 5 prediction heads.
    pub fn paper(action_dim: usize, obs: ObsSpec) -> Self {
        Self {
            ordering: Ordering::Reverse,
            enc_layers: 4,
            dec_layers: 6,
            heads: 8,
            d_model: 512,
            d_ff: 3200,
            dropout: 0.1,
            mtp_heads: 5,
            max_len: T_MAX,
            action_dim,
            obs,
            loss_weights: LossWeights::default(),
            loss_variant: LossVariant::default(),
            feed: LatentFeed::default(),
            stop_rule: StopRule::default(),
            ensemble: EnsembleConfig::default(),
        }
    }

    /// Scaled-down settings for CPU runs: width 64, feedforward 256, 4 heads,
    /// 2 encoder and 2 trunk layers. Head count and everything else as `paper`.
    pub fn desk(action_dim: usize, obs: ObsSpec) -> Self {
        Self {
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            d_model: 64,
            d_ff: 256,
            ..Self::paper(action_dim, obs)
        }
    }

    pub fn for_profile(profile: Profile, action_dim: usize, obs: ObsSpec) -> Self {
        match profile {
            Profile::Paper => Self::paper(action_dim, obs),
            Profile::Desk => Self::desk(action_dim, obs),
        }
    }

    /// Number of learned decoder positions (covers the longest chain and
    /// the keyframe-augmented chunk).
    pub fn positions(&self) -> usize {
        self.max_len.max(self.ordering.capacity(self.max_len))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoaError::Config(m));
        if self.mtp_heads == 0 {
            return bad("mtp_heads must be >= 1".into());
        }
        if self.dec_layers == 0 {
            return bad("dec_layers must be >= 1".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if self.d_ff == 0 || self.max_len == 0 || self.action_dim == 0 {
            return bad("d_ff, max_len and action_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.ensemble.m < 0.0 || self.ensemble.k == 0 {
            return bad("ensemble needs m >= 0 and k >= 1".into());
        }
        if let StopRule::Proximity { eps } = self.stop_rule {
            if eps.is_nan() || eps <= 0.0 {
                return bad(format!("proximity eps {eps} must be positive"));
            }
        }
        self.obs.validate()
    }
}
