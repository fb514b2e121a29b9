//! Loss trace as CSV, one row per iteration.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{CoaError, Result};
use crate::model::LossBreakdown;

pub const TRACE_HEADER: &str = "iter,total,act,lat,stop,eval_sr";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iter: u64,
    pub loss: LossBreakdown,
    /// Success rate of the periodic evaluation, when one ran.
    pub eval_sr: Option<f64>,
}

/// Writes `rows` with full float precision; empty `eval_sr` means no
/// evaluation at that iteration.
pub fn write_trace(path: impl AsRef<Path>, rows: &[TraceRow]) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for r in rows {
        let l = &r.loss;
        let _ = write!(s, "{},{:?},{:?},{:?},{:?},", r.iter, l.total, l.act, l.lat, l.stop);
        if let Some(sr) = r.eval_sr {
            let _ = write!(s, "{sr:?}");
        }
        s.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CoaError::io(dir, e))?;
    }
    fs::write(path, s).map_err(|e| CoaError::io(path, e))
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| CoaError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(CoaError::Config(format!("{}: missing trace header", path.display())));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = |m: &str| CoaError::Config(format!("{}: line {}: {m}", path.display(), i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad("expected 6 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad number {s:?}")));
            Ok(TraceRow {
                iter: f[0].parse().map_err(|_| bad("bad iteration"))?,
                loss: LossBreakdown {
                    total: num(f[1])?,
                    act: num(f[2])?,
                    lat: num(f[3])?,
                    stop: num(f[4])?,
                },
                eval_sr: if f[5].is_empty() { None } else { Some(num(f[5])?) },
            })
        })
        .collect()
}
