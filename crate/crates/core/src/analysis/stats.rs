use serde::{Deserialize, Serialize};

use crate::error::{CoaError, Result};

/// Pearson product-moment correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(CoaError::Analysis(format!("pearson: {} xs vs {} ys", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(CoaError::Analysis(format!("pearson needs at least 2 points, got {}", xs.len())));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(CoaError::Analysis("pearson: zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Sample mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Success rate of one variant at one spread level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariancePoint {
    pub variant: String,
    pub spread: f64,
    /// Realized spatial variance of the evaluated object positions.
    pub variance: f64,
    pub success_rate: f64,
}

/// Correlation of one series; `r` is `None` when undefined (zero variance).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub label: String,
    pub r: Option<f64>,
    pub note: Option<String>,
    pub paper_ref: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceAnalysis {
    pub points: Vec<VariancePoint>,
    pub per_variant: Vec<Correlation>,
    /// Success gap `variant − baseline` against variance.
    pub gap: Option<Correlation>,
}

/// Reference correlations from the original study, keyed by variant label.
pub fn paper_correlation(label: &str) -> Option<f64> {
    match label {
        "coa" => Some(-0.1679),
        "act" => Some(-0.2471),
        "coa-act" => Some(0.1311),
        _ => None,
    }
}

fn correlate(label: String, xs: &[f64], ys: &[f64]) -> Correlation {
    let paper_ref = paper_correlation(&label);
    match pearson(xs, ys) {
        Ok(r) => Correlation {
            label,
            r: Some(r),
            note: None,
            paper_ref,
        },
        Err(e) => Correlation {
            label,
            r: None,
            note: Some(e.to_string()),
            paper_ref,
        },
    }
}

/// Per-variant Pearson r of success against spatial variance across spread
/// levels, plus the r of `variant − baseline` when both are present.
pub fn variance_success_analysis(points: &[VariancePoint], baseline: Option<(&str, &str)>) -> Result<VarianceAnalysis> {
    let mut variants: Vec<&str> = points.iter().map(|p| p.variant.as_str()).collect();
    variants.sort_unstable();
    variants.dedup();
    let series = |v: &str| -> Vec<&VariancePoint> {
        let mut s: Vec<&VariancePoint> = points.iter().filter(|p| p.variant == v).collect();
        s.sort_by(|a, b| a.spread.total_cmp(&b.spread));
        s
    };
    let mut per_variant = Vec::new();
    for v in &variants {
        let s = series(v);
        if s.len() < 3 {
            return Err(CoaError::Analysis(format!(
                "variant {v} has {} spread levels, need at least 3",
                s.len()
            )));
        }
        let xs: Vec<f64> = s.iter().map(|p| p.variance).collect();
        let ys: Vec<f64> = s.iter().map(|p| p.success_rate).collect();
        per_variant.push(correlate(v.to_string(), &xs, &ys));
    }
    let gap = match baseline {
        Some((a, b)) => {
            let (sa, sb) = (series(a), series(b));
            if sa.len() != sb.len() || sa.iter().zip(&sb).any(|(x, y)| x.spread != y.spread) {
                return Err(CoaError::Analysis(format!("variants {a} and {b} cover different spread levels")));
            }
            let xs: Vec<f64> = sa.iter().zip(&sb).map(|(x, y)| (x.variance + y.variance) / 2.0).collect();
            let ys: Vec<f64> = sa.iter().zip(&sb).map(|(x, y)| x.success_rate - y.success_rate).collect();
            Some(correlate(format!("{a}-{b}"), &xs, &ys))
        }
        None => None,
    };
    Ok(VarianceAnalysis {
        points: points.to_vec(),
        per_variant,
        gap,
    })
}
