//! JSON Lines dataset container.
//!
//! Line 0 is the manifest, each following line one episode. The sidecar
//! `<path>.sha256` holds the digest of the whole file on its first line and
//! then one digest per line of the dataset, so corruption can be pinned to a
//! single record. Records are numbered like lines: the manifest is record 0
//! and episode `k` is record `k + 1`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, DemoStep, Demonstration, NormStats};
use crate::error::{CoaError, Result};
use crate::sim::TaskId;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub task: TaskId,
    pub action_dim: usize,
    pub obs_dim: usize,
    pub norm_stats: NormStats,
    pub count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeRecord {
    seed: u64,
    object_positions: Vec<[f64; 2]>,
    steps: Vec<DemoStep>,
    success: bool,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".sha256");
    PathBuf::from(s)
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| CoaError::Dataset(e.to_string()))
}

fn record_err(index: usize, reason: impl Into<String>) -> CoaError {
    CoaError::Record {
        index,
        reason: reason.into(),
    }
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let path = path.as_ref();
    if ds.manifest.count != ds.demos.len() {
        return Err(CoaError::Dataset(format!(
            "manifest count {} does not match {} episodes",
            ds.manifest.count,
            ds.demos.len()
        )));
    }
    let mut lines = vec![json(&ds.manifest)?];
    for d in &ds.demos {
        if d.task != ds.manifest.task {
            return Err(CoaError::Dataset(format!("episode {} is for task {}", d.seed, d.task)));
        }
        lines.push(json(&EpisodeRecord {
            seed: d.seed,
            object_positions: d.object_positions.clone(),
            steps: d.steps.clone(),
            success: d.success,
        })?);
    }
    let mut body = String::new();
    for l in &lines {
        body.push_str(l);
        body.push('\n');
    }
    let mut sums = format!("{}\n", digest(body.as_bytes()));
    for l in &lines {
        sums.push_str(&digest(l.as_bytes()));
        sums.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CoaError::io(dir, e))?;
    }
    fs::write(path, &body).map_err(|e| CoaError::io(path, e))?;
    let side = sidecar(path);
    fs::write(&side, sums).map_err(|e| CoaError::io(&side, e))?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let body = fs::read(path).map_err(|e| CoaError::io(path, e))?;
    if body.is_empty() {
        return Err(CoaError::Dataset(format!("{} is empty", path.display())));
    }
    let side = sidecar(path);
    let sums = fs::read_to_string(&side).map_err(|e| CoaError::io(&side, e))?;
    let mut sums = sums.lines();
    let whole = sums
        .next()
        .ok_or_else(|| CoaError::Dataset("checksum file is empty".into()))?;
    let expected: Vec<&str> = sums.collect();

    let text = std::str::from_utf8(&body);
    let lines: Vec<&[u8]> = body.split(|&b| b == b'\n').collect();
    // A well-formed file ends with a newline, leaving one empty trailing piece.
    let (complete, tail) = lines.split_at(lines.len() - 1);
    for (i, line) in complete.iter().enumerate() {
        match expected.get(i) {
            Some(want) if *want == digest(line) => {}
            Some(_) => return Err(record_err(i, "checksum mismatch")),
            None => return Err(record_err(i, "not listed in the checksum file")),
        }
    }
    if !tail[0].is_empty() || complete.len() < expected.len() {
        return Err(record_err(complete.len(), "truncated file"));
    }
    if digest(&body) != whole {
        return Err(CoaError::Dataset("whole-file checksum mismatch".into()));
    }
    let text = text.map_err(|e| CoaError::Dataset(format!("not UTF-8: {e}")))?;
    let mut it = text.lines();
    let manifest: DatasetManifest = it
        .next()
        .map(serde_json::from_str)
        .transpose()
        .map_err(|e| record_err(0, e.to_string()))?
        .ok_or_else(|| record_err(0, "missing manifest"))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(record_err(
            0,
            format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                manifest.format_version
            ),
        ));
    }
    manifest.norm_stats.validate()?;
    let mut demos = Vec::with_capacity(manifest.count);
    for (k, line) in it.enumerate() {
        let idx = k + 1;
        let rec: EpisodeRecord = serde_json::from_str(line).map_err(|e| record_err(idx, e.to_string()))?;
        if rec.steps.len() < 2 {
            return Err(record_err(idx, "episode has fewer than 2 steps"));
        }
        if rec
            .steps
            .iter()
            .any(|s| s.act.len() != manifest.action_dim || s.obs.len() != manifest.obs_dim)
        {
            return Err(record_err(idx, "step dimensions disagree with the manifest"));
        }
        demos.push(Demonstration {
            task: manifest.task,
            seed: rec.seed,
            steps: rec.steps,
            success: rec.success,
            object_positions: rec.object_positions,
        });
    }
    if demos.len() != manifest.count {
        return Err(record_err(
            demos.len() + 1,
            format!("manifest promises {} episodes, found {}", manifest.count, demos.len()),
        ));
    }
    Ok(Dataset { manifest, demos })
}
