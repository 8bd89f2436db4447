//! Variant and iteration-count sweep under one seed.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::eval::evaluate;
use super::train::{prepare_samples, train};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::alpha_key;
use crate::spatial::GraphVariant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSetting {
    pub variant: GraphVariant,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: GraphVariant,
    pub iterations: usize,
    pub best_epoch: Option<usize>,
    /// Recall per threshold, in the order of `eval.alphas`.
    pub recall: Vec<f64>,
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: RunConfig,
    pub rows: Vec<AblationRow>,
}

/// Every variant at the configured iteration count, then the full graph at
/// N = 0..=4. Duplicates are dropped, keeping first occurrence.
pub fn default_settings(iterations: usize) -> Vec<AblationSetting> {
    let mut out: Vec<AblationSetting> = GraphVariant::ALL
        .into_iter()
        .map(|variant| AblationSetting { variant, iterations })
        .chain((0..=4).map(|iterations| AblationSetting {
            variant: GraphVariant::Full,
            iterations,
        }))
        .collect();
    let mut seen = Vec::new();
    out.retain(|s| {
        let fresh = !seen.contains(s);
        seen.push(*s);
        fresh
    });
    out
}

pub fn ablate(config: &RunConfig, data: &Dataset, settings: &[AblationSetting]) -> Result<AblationReport> {
    if data.val.is_empty() {
        return Err(Error::Load("ablation needs a non-empty validation split".into()));
    }
    let mut rows = Vec::with_capacity(settings.len());
    for s in settings {
        let mut c = config.clone();
        c.graph.variant = s.variant;
        c.graph.iterations = s.iterations;
        c.paths.checkpoint = None;
        c.paths.train_log = None;
        log::info!("ablation: {} with N={}", s.variant, s.iterations);
        let out = train(&c, data)?;
        let val = prepare_samples(&out.model, &out.vocab, &data.val, c.loss.smoothing())?;
        let report = evaluate(&out.model, &val, &c.eval.alphas, c.eval.swap_degenerate, c.train.parallelism)?.report;
        rows.push(AblationRow {
            variant: s.variant,
            iterations: s.iterations,
            best_epoch: out.log.best_epoch,
            recall: c.eval.alphas.iter().map(|&a| report.recall(a).unwrap_or(f64::NAN)).collect(),
            miou: report.miou,
        });
    }
    Ok(AblationReport { config: config.clone(), rows })
}

impl AblationReport {
    pub fn row(&self, variant: GraphVariant, iterations: usize) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant && r.iterations == iterations)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,iterations");
        for a in &self.config.eval.alphas {
            let _ = write!(out, ",R@{}", alpha_key(*a));
        }
        out.push_str(",mIoU\n");
        for r in &self.rows {
            let _ = write!(out, "{},{}", r.variant, r.iterations);
            for v in &r.recall {
                let _ = write!(out, ",{v:.2}");
            }
            let _ = writeln!(out, ",{:.2}", r.miou);
        }
        out
    }
}
