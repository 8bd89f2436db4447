//! Temporal IoU, recall at thresholds, mIoU and the random baseline.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ALPHAS: [f64; 4] = [0.3, 0.5, 0.7, 0.9];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start_s: f64,
    pub end_s: f64,
}

impl Interval {
    pub fn new(start_s: f64, end_s: f64) -> Self {
        Interval { start_s, end_s }
    }

    pub fn length(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn is_degenerate(&self) -> bool {
        self.end_s < self.start_s
    }

    pub fn swapped(&self) -> Self {
        Interval::new(self.end_s.min(self.start_s), self.end_s.max(self.start_s))
    }
}

pub fn tiou(a: Interval, b: Interval) -> f64 {
    let inter = (a.end_s.min(b.end_s) - a.start_s.max(b.start_s)).max(0.0);
    let union = a.length() + b.length() - inter;
    if union <= 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    inter / union
}

/// Per-pair tIoU. Reversed predictions score zero unless `swap_degenerate`
/// reorders them first.
pub fn pair_ious(pairs: &[(Interval, Interval)], swap_degenerate: bool) -> Vec<f64> {
    pairs
        .iter()
        .map(|&(pred, gt)| match (pred.is_degenerate(), swap_degenerate) {
            (false, _) => tiou(pred, gt),
            (true, true) => tiou(pred.swapped(), gt),
            (true, false) => 0.0,
        })
        .collect()
}

fn non_empty(ious: &[f64]) -> Result<()> {
    if ious.is_empty() {
        return Err(Error::Input("no prediction/ground-truth pairs to score".into()));
    }
    Ok(())
}

/// Percentage of pairs with tIoU strictly above each threshold.
pub fn recall_at(ious: &[f64], alphas: &[f64]) -> Result<Vec<f64>> {
    non_empty(ious)?;
    Ok(alphas
        .iter()
        .map(|&a| 100.0 * ious.iter().filter(|&&v| v > a).count() as f64 / ious.len() as f64)
        .collect())
}

pub fn miou(ious: &[f64]) -> Result<f64> {
    non_empty(ious)?;
    Ok(100.0 * ious.iter().sum::<f64>() / ious.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Threshold (formatted as in the config) to percentage.
    pub recall_at: BTreeMap<String, f64>,
    pub miou: f64,
    pub n_samples: usize,
    pub n_degenerate: usize,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub ious: Vec<f64>,
}

pub fn alpha_key(alpha: f64) -> String {
    format!("{alpha}")
}

impl EvalReport {
    pub fn from_pairs(pairs: &[(Interval, Interval)], alphas: &[f64], swap_degenerate: bool) -> Result<Self> {
        let ious = pair_ious(pairs, swap_degenerate);
        let recalls = recall_at(&ious, alphas)?;
        Ok(EvalReport {
            recall_at: alphas.iter().map(|&a| alpha_key(a)).zip(recalls).collect(),
            miou: miou(&ious)?,
            n_samples: pairs.len(),
            n_degenerate: pairs.iter().filter(|p| p.0.is_degenerate()).count(),
            ious,
        })
    }

    pub fn recall(&self, alpha: f64) -> Option<f64> {
        self.recall_at.get(&alpha_key(alpha)).copied()
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let mut alphas: Vec<(f64, f64)> = self.recall_at.iter().map(|(k, &v)| (k.parse().unwrap_or(f64::NAN), v)).collect();
        alphas.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (a, _) in &alphas {
            let _ = write!(out, "{:>9}", format!("R@{a}"));
        }
        let _ = writeln!(out, "{:>9}{:>9}{:>11}", "mIoU", "samples", "degenerate");
        for (_, v) in &alphas {
            let _ = write!(out, "{v:>9.2}");
        }
        let _ = writeln!(out, "{:>9.2}{:>9}{:>11}", self.miou, self.n_samples, self.n_degenerate);
        out
    }

    pub fn ious_csv(&self) -> String {
        let mut out = String::from("index,tiou\n");
        for (i, v) in self.ious.iter().enumerate() {
            let _ = writeln!(out, "{i},{v}");
        }
        out
    }
}

/// Scores a uniformly drawn segment per ground truth.
pub fn random_baseline<R: Rng + ?Sized>(gts: &[(Interval, f64)], alphas: &[f64], rng: &mut R) -> Result<EvalReport> {
    let pairs: Vec<(Interval, Interval)> = gts
        .iter()
        .map(|&(gt, duration)| {
            let a = rng.random::<f64>() * duration;
            let b = rng.random::<f64>() * duration;
            (Interval::new(a.min(b), a.max(b)), gt)
        })
        .collect();
    EvalReport::from_pairs(&pairs, alphas, false)
}
