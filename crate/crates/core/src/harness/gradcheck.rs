//! Central-difference check of every parameter block against the tape.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Binder, ParamSet, Tape, Tensor};
use crate::error::Result;
use crate::losses::{build_targets, Smoothing};
use crate::metrics::Interval;
use crate::model::{Model, ModelConfig, SampleInput};
use crate::spatial::GraphVariant;
use crate::visual::FrameObservations;

/// Blocks whose true gradient is zero (biases under a shift-invariant
/// softmax) see only finite-difference noise, around 1e-11 here.
const SCALE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub variant: GraphVariant,
    pub iterations: usize,
    pub steps: usize,
    /// Largest per-frame human and object counts; frames cycle through
    /// smaller counts down to zero.
    pub max_humans: usize,
    pub max_objects: usize,
    pub latent: usize,
    pub epsilon: f64,
    pub threshold: f64,
    pub seed: u64,
    /// Perturbs the analytic gradient of the named block before comparing.
    /// Only useful as a negative control.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrupt_block: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            variant: GraphVariant::Full,
            iterations: 2,
            steps: 4,
            max_humans: 2,
            max_objects: 3,
            latent: 8,
            epsilon: 1e-5,
            threshold: 1e-4,
            seed: 0,
            corrupt_block: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockResult {
    pub name: String,
    pub numel: usize,
    /// `max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-6)`.
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub options: GradcheckOptions,
    pub blocks: Vec<BlockResult>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn to_table(&self) -> String {
        let width = self.blocks.iter().map(|b| b.name.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<width$} {:>6} {:>12}  status\n", "block", "numel", "rel_error");
        for b in &self.blocks {
            let _ = writeln!(out, "{:<width$} {:>6} {:>12.3e}  {}", b.name, b.numel, b.max_rel_error, if b.passed { "pass" } else { "FAIL" });
        }
        let _ = writeln!(out, "{}", if self.passed { "all blocks pass" } else { "gradient check FAILED" });
        out
    }
}

/// A small random model and sample exercising every node type.
pub fn tiny_instance(opts: &GradcheckOptions) -> Result<(Model, SampleInput)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (d_v, d_o, vocab) = (6, 5, 7);
    let config = ModelConfig {
        vocab_size: vocab,
        d_w: 5,
        text_hidden: 3,
        d_v,
        d_o,
        latent: opts.latent,
        hidden: 4,
        temporal_layers: 2,
        dropout: 0.5,
        variant: opts.variant,
        iterations: opts.iterations,
    };
    let model = Model::new(config, &mut rng)?;
    let t = opts.steps;
    let activity = Tensor::uniform(&[t, d_v], -1.0, 1.0, &mut rng);
    let frames: Vec<FrameObservations> = (0..t)
        .map(|i| {
            let h = opts.max_humans.saturating_sub(i % (opts.max_humans + 1));
            let o = opts.max_objects.saturating_sub(i % (opts.max_objects + 1));
            FrameObservations {
                humans: Tensor::uniform(&[h, d_o], -1.0, 1.0, &mut rng),
                objects: Tensor::uniform(&[o, d_o], -1.0, 1.0, &mut rng),
                human_labels: vec!["person".into(); h],
                object_labels: vec!["thing".into(); o],
            }
        })
        .collect();
    let stride = 1.0;
    let video = model.prepare_video(&activity, &frames, stride, t as f64 * stride)?;
    let token_ids = (0..4).map(|_| rng.random_range(1..vocab)).collect();
    let (a, b) = (t / 4, (3 * t) / 4);
    let target = build_targets(a as f64, b as f64, stride, t, Smoothing::Gaussian { sigma: 1.0 })?;
    Ok((
        model,
        SampleInput {
            token_ids,
            video: std::sync::Arc::new(video),
            target,
            ground_truth: Interval::new(a as f64, b as f64),
        },
    ))
}

fn loss_value(model: &Model, params: &ParamSet, sample: &SampleInput) -> Result<f64> {
    let tape = Tape::new();
    let b = Binder::new(&tape, params);
    Ok(model.loss(&b, sample, None)?.total.value().item())
}

pub fn gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let (model, sample) = tiny_instance(opts)?;
    let analytic = {
        let tape = Tape::new();
        let b = Binder::new(&tape, &model.params);
        let loss = model.loss(&b, &sample, None)?;
        b.collect(&tape.backward(loss.total)?)
    };
    let mut params = model.params.clone();
    let ids: Vec<_> = model.params.ids().collect();
    let mut blocks = Vec::with_capacity(ids.len());
    for id in ids {
        let name = model.params.name(id).to_string();
        let mut grad = analytic.get(id).clone();
        if opts.corrupt_block.as_deref() == Some(name.as_str()) {
            grad.data_mut()[0] += 1.0 + grad.data()[0].abs();
        }
        let n = grad.numel();
        let (mut diff, mut scale) = (0.0f64, SCALE_FLOOR);
        for i in 0..n {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + opts.epsilon;
            let up = loss_value(&model, &params, &sample)?;
            params.get_mut(id).data_mut()[i] = orig - opts.epsilon;
            let down = loss_value(&model, &params, &sample)?;
            params.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.epsilon);
            let a = grad.data()[i];
            diff = diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        let rel = diff / scale;
        blocks.push(BlockResult {
            name,
            numel: n,
            max_rel_error: rel,
            passed: rel < opts.threshold,
        });
    }
    let passed = blocks.iter().all(|b| b.passed);
    Ok(GradcheckReport {
        options: opts.clone(),
        blocks,
        passed,
    })
}
