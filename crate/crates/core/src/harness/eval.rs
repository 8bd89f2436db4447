//! Batch inference and scoring over prepared samples.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::train::PreparedSample;
use crate::error::Result;
use crate::metrics::{tiou, EvalReport, Interval};
use crate::model::Model;
use crate::parallel::Parallelism;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub video_id: String,
    pub query: String,
    pub pred_start_s: f64,
    pub pred_end_s: f64,
    pub gt_start_s: f64,
    pub gt_end_s: f64,
    pub tiou: f64,
}

pub struct Evaluation {
    pub report: EvalReport,
    pub predictions: Vec<PredictionRecord>,
}

pub fn evaluate(model: &Model, samples: &[PreparedSample], alphas: &[f64], swap_degenerate: bool, par: Parallelism) -> Result<Evaluation> {
    let preds = par.map(samples, |_, s| model.predict(&s.input.token_ids, &s.input.video));
    let mut pairs = Vec::with_capacity(samples.len());
    for (s, p) in samples.iter().zip(preds) {
        let p = p?;
        pairs.push((Interval::new(p.start_seconds, p.end_seconds), s.input.ground_truth));
    }
    let report = EvalReport::from_pairs(&pairs, alphas, swap_degenerate)?;
    let predictions = samples
        .iter()
        .zip(&pairs)
        .zip(&report.ious)
        .map(|((s, (pred, gt)), &iou)| PredictionRecord {
            video_id: s.video_id.clone(),
            query: s.query.clone(),
            pred_start_s: pred.start_s,
            pred_end_s: pred.end_s,
            gt_start_s: gt.start_s,
            gt_end_s: gt.end_s,
            tiou: iou,
        })
        .collect();
    Ok(Evaluation { report, predictions })
}

pub fn predictions_jsonl(records: &[PredictionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(out, "{}", serde_json::to_string(r).expect("record serializes"));
    }
    out
}

/// Recomputes tIoU from a record's own endpoints.
pub fn record_tiou(r: &PredictionRecord, swap_degenerate: bool) -> f64 {
    let mut pred = Interval::new(r.pred_start_s, r.pred_end_s);
    if pred.is_degenerate() {
        if !swap_degenerate {
            return 0.0;
        }
        pred = pred.swapped();
    }
    tiou(pred, Interval::new(r.gt_start_s, r.gt_end_s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::RunConfig;
    use crate::harness::train::{build_vocabulary, init_model, prepare_samples};
    use crate::synth::{generate, SyntheticSpec};

    #[test]
    fn records_agree_with_the_report() {
        let spec = SyntheticSpec {
            n_samples: 15,
            ..SyntheticSpec::default()
        };
        let data = generate(&spec).unwrap().to_dataset().unwrap();
        let config = RunConfig::synthetic_default();
        let vocab = build_vocabulary(&data.train);
        let model = init_model(&config, &vocab).unwrap();
        let samples = prepare_samples(&model, &vocab, &data.train, config.loss.smoothing()).unwrap();
        let ev = evaluate(&model, &samples, &[0.3, 0.5], false, Parallelism::Rayon).unwrap();
        assert_eq!(ev.predictions.len(), samples.len());
        assert_eq!(ev.report.n_samples, samples.len());
        let mean = 100.0 * ev.predictions.iter().map(|r| record_tiou(r, false)).sum::<f64>() / samples.len() as f64;
        assert!((mean - ev.report.miou).abs() < 1e-9);
        let seq = evaluate(&model, &samples, &[0.3, 0.5], false, Parallelism::Sequential).unwrap();
        assert_eq!(seq.report, ev.report);
        let lines = predictions_jsonl(&ev.predictions);
        assert_eq!(lines.lines().count(), samples.len());
        let first: PredictionRecord = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
        assert_eq!(first, ev.predictions[0]);
    }
}
