//! `results.csv`, `analysis.json`, `attention_dump.json` and the
//! per-episode log.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{mean_std, AttentionDump, EvalReport, LayerAttention, VarianceAnalysis, SCHEMA_VERSION};
use crate::error::{CoaError, Result};

pub const RESULTS_HEADER: &str = "schema_version,variant,task,split,seeds,mean_sr,std_sr,paper_ref_value";

/// One `results.csv` line: a variant's success over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub variant: String,
    pub task: String,
    pub split: String,
    pub seeds: Vec<u64>,
    pub mean_sr: f64,
    pub std_sr: f64,
    pub paper_ref_value: Option<f64>,
}

impl ResultRow {
    /// Aggregates one report per seed.
    pub fn from_reports(reports: &[(u64, &EvalReport)], paper_ref_value: Option<f64>) -> Result<Self> {
        let (_, first) = reports
            .first()
            .ok_or_else(|| CoaError::Analysis("result row without reports".into()))?;
        let rates: Vec<f64> = reports.iter().map(|(_, r)| r.success_rate).collect();
        let (mean_sr, std_sr) = mean_std(&rates);
        Ok(Self {
            variant: first.variant.clone(),
            task: first.task.name().to_string(),
            split: first.split.name().to_string(),
            seeds: reports.iter().map(|(s, _)| *s).collect(),
            mean_sr,
            std_sr,
            paper_ref_value,
        })
    }
}

/// Contents of `analysis.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisJson {
    pub schema_version: u32,
    pub correlation: Option<VarianceAnalysis>,
    pub attention: Vec<LayerAttention>,
}

#[derive(Serialize)]
struct EpisodeLine<'a> {
    schema_version: u32,
    variant: &'a str,
    task: &'a str,
    split: &'a str,
    seed: u64,
    objects: &'a [[f64; 2]],
    success: bool,
    length: usize,
}

fn write(path: &Path, s: String) -> Result<()> {
    fs::write(path, s).map_err(|e| CoaError::io(path, e))
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| CoaError::Analysis(e.to_string()))
}

/// Writes `results.csv`, `analysis.json`, `episodes.jsonl` and, when given,
/// `attention_dump.json` into `dir`.
pub fn emit_report(
    dir: impl AsRef<Path>,
    rows: &[ResultRow],
    reports: &[EvalReport],
    analysis: &AnalysisJson,
    attention: Option<&AttentionDump>,
) -> Result<()> {
    let dir = dir.as_ref();
    if rows.is_empty() {
        return Err(CoaError::Analysis("nothing to report".into()));
    }
    fs::create_dir_all(dir).map_err(|e| CoaError::io(dir, e))?;

    let mut csv = String::from(RESULTS_HEADER);
    csv.push('\n');
    for r in rows {
        if [&r.variant, &r.task, &r.split].iter().any(|f| f.contains([',', '\n'])) {
            return Err(CoaError::Analysis(format!("field of row {:?} contains a separator", r.variant)));
        }
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        let paper = r.paper_ref_value.map(|v| format!("{v:?}")).unwrap_or_default();
        let _ = writeln!(
            csv,
            "{SCHEMA_VERSION},{},{},{},{},{:?},{:?},{paper}",
            r.variant,
            r.task,
            r.split,
            seeds.join(";"),
            r.mean_sr,
            r.std_sr
        );
    }
    write(&dir.join("results.csv"), csv)?;

    let analysis = AnalysisJson {
        schema_version: SCHEMA_VERSION,
        ..analysis.clone()
    };
    write(&dir.join("analysis.json"), json(&analysis)?)?;

    let mut lines = String::new();
    for rep in reports {
        for e in &rep.episodes {
            let line = EpisodeLine {
                schema_version: SCHEMA_VERSION,
                variant: &rep.variant,
                task: rep.task.name(),
                split: rep.split.name(),
                seed: e.seed,
                objects: &e.objects,
                success: e.success,
                length: e.length,
            };
            lines.push_str(&serde_json::to_string(&line).map_err(|e| CoaError::Analysis(e.to_string()))?);
            lines.push('\n');
        }
    }
    write(&dir.join("episodes.jsonl"), lines)?;

    if let Some(dump) = attention {
        let dump = AttentionDump {
            schema_version: SCHEMA_VERSION,
            ..dump.clone()
        };
        write(&dir.join("attention_dump.json"), json(&dump)?)?;
    }
    Ok(())
}

pub fn read_results_csv(path: impl AsRef<Path>) -> Result<Vec<ResultRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| CoaError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(RESULTS_HEADER) {
        return Err(CoaError::Analysis(format!("{}: unexpected header", path.display())));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = |m: String| CoaError::Analysis(format!("{}: line {}: {m}", path.display(), i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad(format!("expected 8 fields, found {}", f.len())));
            }
            if f[0] != SCHEMA_VERSION.to_string() {
                return Err(bad(format!("schema version {} (expected {SCHEMA_VERSION})", f[0])));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number {s:?}")));
            let seeds = if f[4].is_empty() {
                Vec::new()
            } else {
                f[4].split(';')
                    .map(|s| s.parse().map_err(|_| bad(format!("bad seed {s:?}"))))
                    .collect::<Result<_>>()?
            };
            Ok(ResultRow {
                variant: f[1].to_string(),
                task: f[2].to_string(),
                split: f[3].to_string(),
                seeds,
                mean_sr: num(f[5])?,
                std_sr: num(f[6])?,
                paper_ref_value: if f[7].is_empty() { None } else { Some(num(f[7])?) },
            })
        })
        .collect()
}
