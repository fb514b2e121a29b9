//! Run configuration: profile defaults, overridden by a TOML file, overridden
//! by command-line flags, with the origin of every value recorded.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::analysis::{AblationAxis, Split, DEFAULT_EPISODES, DEFAULT_LOCALITY_WINDOW};
use crate::dataset::{ActionLayout, KeyframeMode};
use crate::error::{CoaError, Result};
use crate::model::{obs_spec_for, ModelConfig, Profile};
use crate::sim::{TaskId, TaskSpec};
use crate::trainer::TrainConfig;

/// Where a resolved value came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Default,
    File,
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Flag => "flag",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSettings {
    pub n_demos: usize,
    pub layout: ActionLayout,
    pub keyframe: KeyframeMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub eval_episodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub episodes: usize,
    pub split: Split,
    pub locality_window: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSettings {
    pub axes: Vec<AblationAxis>,
    pub seeds: Vec<u64>,
    /// Spread levels of the variance/success correlation study.
    pub spreads: Vec<f64>,
}

/// Fully resolved settings of one run. Every source of randomness derives
/// from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    /// Encode observations as rendered images instead of state groups.
    pub raster: bool,
    pub task: TaskSpec,
    pub data: DataSettings,
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub eval: EvalSettings,
    pub ablate: AblateSettings,
}

impl RunConfig {
    pub fn defaults(profile: Profile, task: TaskId, raster: bool) -> Self {
        let spec = TaskSpec::new(task);
        let layout = ActionLayout::Planar4;
        let t = TrainConfig::for_profile(profile, 0);
        Self {
            profile,
            seed: 0,
            raster,
            model: ModelConfig::for_profile(profile, layout.dim(), obs_spec_for(&spec, raster)),
            task: spec,
            data: DataSettings {
                n_demos: 100,
                layout,
                keyframe: KeyframeMode::LastAction,
            },
            train: TrainSettings {
                iterations: t.iterations,
                batch_size: t.batch_size,
                lr: t.lr,
                weight_decay: t.weight_decay,
                eval_every: t.eval_every,
                checkpoint_every: t.checkpoint_every,
                eval_episodes: t.eval_episodes,
            },
            eval: EvalSettings {
                episodes: DEFAULT_EPISODES,
                split: Split::Interp,
                locality_window: DEFAULT_LOCALITY_WINDOW,
            },
            ablate: AblateSettings {
                axes: AblationAxis::ALL.to_vec(),
                seeds: vec![0, 1, 2],
                spreads: vec![0.02, 0.06, 0.10, 0.14],
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            iterations: t.iterations,
            batch_size: t.batch_size,
            lr: t.lr,
            weight_decay: t.weight_decay,
            seed: self.seed,
            eval_every: t.eval_every,
            checkpoint_every: t.checkpoint_every,
            profile: self.profile,
            eval_episodes: t.eval_episodes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.train_config().validate()?;
        if self.model.action_dim != self.data.layout.dim() {
            return Err(CoaError::Config(format!(
                "model.action_dim {} does not match data.layout ({} values)",
                self.model.action_dim,
                self.data.layout.dim()
            )));
        }
        if self.seed >= 1 << 31 {
            return Err(CoaError::Config(format!("seed {} must be below 2^31", self.seed)));
        }
        if self.eval.episodes == 0 || self.data.n_demos == 0 {
            return Err(CoaError::Config("eval.episodes and data.n_demos must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CoaError::Config(e.to_string()))
    }
}

/// A resolved config and the origin of each leaf value (dotted keys).
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub config: RunConfig,
    pub provenance: BTreeMap<String, Source>,
}

impl Resolved {
    /// `resolved_config.toml`: the config, then the provenance table as
    /// comments, then the tool version.
    pub fn render(&self) -> Result<String> {
        let mut s = format!("# coa {}\n", env!("CARGO_PKG_VERSION"));
        s.push_str(&self.config.to_toml()?);
        s.push_str("\n# provenance\n");
        for (k, v) in &self.provenance {
            s.push_str(&format!("# {k} = {v}\n"));
        }
        Ok(s)
    }
}

fn kind_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

/// Line of the first `key =` assignment in `text`, for error locations.
fn locate(text: &str, key: &str) -> Option<usize> {
    let leaf = key.rsplit('.').next().unwrap_or(key);
    text.lines().position(|l| {
        let l = l.trim_start();
        l.strip_prefix(leaf).is_some_and(|r| r.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

struct Layer<'a> {
    source: Source,
    origin: &'a str,
    text: &'a str,
}

impl Layer<'_> {
    fn error(&self, key: &str, msg: String) -> CoaError {
        let at = match locate(self.text, key) {
            Some(line) => format!("{}:{line}", self.origin),
            None => self.origin.to_string(),
        };
        CoaError::Config(format!("{msg} (key `{key}`, {at})"))
    }
}

/// Tables with a `kind` tag select an enum variant and are replaced whole.
fn is_tagged(t: &Table) -> bool {
    t.contains_key("kind")
}

fn merge(base: &mut Table, over: &Table, prefix: &str, layer: &Layer, prov: &mut BTreeMap<String, Source>) -> Result<()> {
    for (k, v) in over {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let Some(slot) = base.get_mut(k) else {
            return Err(layer.error(&key, "unknown key".into()));
        };
        match (slot, v) {
            (Value::Table(b), Value::Table(o)) if !is_tagged(b) => merge(b, o, &key, layer, prov)?,
            (slot @ Value::Float(_), Value::Integer(i)) => {
                *slot = Value::Float(*i as f64);
                prov.insert(key, layer.source);
            }
            (slot, v) => {
                if std::mem::discriminant(slot) != std::mem::discriminant(v) {
                    return Err(layer.error(
                        &key,
                        format!("type mismatch: expected {}, found {}", kind_name(slot), kind_name(v)),
                    ));
                }
                *slot = v.clone();
                mark(&key, v, layer.source, prov);
            }
        }
    }
    Ok(())
}

fn mark(key: &str, v: &Value, source: Source, prov: &mut BTreeMap<String, Source>) {
    match v {
        Value::Table(t) if !is_tagged(t) => {
            for (k, v) in t {
                mark(&format!("{key}.{k}"), v, source, prov);
            }
        }
        _ => {
            prov.insert(key.to_string(), source);
        }
    }
}

fn parse_table(text: &str, origin: &str) -> Result<Table> {
    text.parse::<Table>().map_err(|e| CoaError::Config(format!("{origin}: {e}")))
}

fn string_at<'a>(t: &'a Table, path: &[&str]) -> Option<&'a str> {
    let (last, head) = path.split_last()?;
    let mut cur = t;
    for p in head {
        cur = cur.get(*p)?.as_table()?;
    }
    cur.get(*last)?.as_str()
}

/// Builds a [`RunConfig`]: profile defaults < `file` < `flags`.
///
/// `flags` holds dotted keys with TOML-typed values (e.g. `model.mtp_heads
/// = 8`). The profile, task and observation mode are settled first since
/// they shape the defaults.
pub fn resolve(file: Option<(&Path, &str)>, flags: &Table) -> Result<Resolved> {
    let origin = file.map(|(p, _)| p.display().to_string()).unwrap_or_default();
    let file_table = match file {
        Some((_, text)) => parse_table(text, &origin)?,
        None => Table::new(),
    };
    let pick = |path: &[&str]| string_at(flags, path).or_else(|| string_at(&file_table, path));
    let profile: Profile = pick(&["profile"]).map(str::parse).transpose()?.unwrap_or(Profile::Desk);
    let task: TaskId = pick(&["task", "task"]).map(str::parse).transpose()?.unwrap_or(TaskId::ReachTarget);
    let raster = flags
        .get("raster")
        .or_else(|| file_table.get("raster"))
        .and_then(Value::as_bool)
        .unwrap_or(false);
    let mut defaults = RunConfig::defaults(profile, task, raster);
    // The action layout changes the model's action width.
    if let Some(layout) = pick(&["data", "layout"]) {
        let layout: ActionLayout = Value::String(layout.into())
            .try_into()
            .map_err(|e| CoaError::Config(format!("data.layout: {e}")))?;
        defaults.model.action_dim = layout.dim();
        defaults.data.layout = layout;
    }
    let mut merged = Table::try_from(&defaults).map_err(|e| CoaError::Config(e.to_string()))?;
    let mut provenance = BTreeMap::new();
    mark("", &Value::Table(merged.clone()), Source::Default, &mut provenance);
    provenance = provenance
        .into_iter()
        .map(|(k, v)| (k.trim_start_matches('.').to_string(), v))
        .collect();
    let file_layer = Layer {
        source: Source::File,
        origin: &origin,
        text: file.map(|(_, t)| t).unwrap_or(""),
    };
    merge(&mut merged, &file_table, "", &file_layer, &mut provenance)?;
    let flag_layer = Layer {
        source: Source::Flag,
        origin: "command line",
        text: "",
    };
    merge(&mut merged, flags, "", &flag_layer, &mut provenance)?;
    let config: RunConfig = Value::Table(merged)
        .try_into()
        .map_err(|e| CoaError::Config(format!("invalid configuration: {e}")))?;
    config.validate()?;
    Ok(Resolved { config, provenance })
}

/// Sets `value` at dotted `key` inside `flags`, creating tables on the way.
pub fn set_flag(flags: &mut Table, key: &str, value: Value) {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut cur = flags;
    for p in parts {
        cur = cur
            .entry(p)
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .expect("flag tables only");
    }
    cur.insert(last.to_string(), value);
}
