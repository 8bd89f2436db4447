//! Mini-batch training with Adam and best-on-validation checkpointing.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::eval::evaluate;
use crate::autodiff::{checkpoint, Adam, Binder, ParamGrads, ParamSet, Tape};
use crate::data::{AnnotatedSample, Dataset};
use crate::error::{Error, Result};
use crate::losses::{build_targets, Smoothing};
use crate::metrics::Interval;
use crate::model::{Model, PreparedVideo, SampleInput};
use crate::parallel::Parallelism;
use crate::text::{load_embedding_file, Vocabulary};

/// A model-ready sample together with what it came from.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub video_id: String,
    pub query: String,
    pub input: SampleInput,
}

/// The vocabulary is rebuilt from the training split, so a checkpoint pairs
/// with the dataset it was trained on.
pub fn build_vocabulary(train: &[AnnotatedSample]) -> Vocabulary {
    Vocabulary::from_tokens(train.iter().flat_map(|s| s.tokens.iter()))
}

pub fn prepare_samples(model: &Model, vocab: &Vocabulary, samples: &[AnnotatedSample], smoothing: Smoothing) -> Result<Vec<PreparedSample>> {
    let mut videos: HashMap<*const crate::data::VideoData, Arc<PreparedVideo>> = HashMap::new();
    samples
        .iter()
        .map(|s| {
            let key = Arc::as_ptr(&s.video);
            let video = match videos.get(&key) {
                Some(v) => v.clone(),
                None => {
                    let f = &s.video.features;
                    let v = Arc::new(model.prepare_video(&f.features, &s.video.frames, f.stride_seconds, s.duration_s)?);
                    videos.insert(key, v.clone());
                    v
                }
            };
            let target = build_targets(s.t_start_s, s.t_end_s, video.stride_seconds, video.len(), smoothing)?;
            Ok(PreparedSample {
                video_id: s.video_id.clone(),
                query: s.query.clone(),
                input: SampleInput {
                    token_ids: vocab.encode(&s.tokens),
                    video,
                    target,
                    ground_truth: Interval::new(s.t_start_s, s.t_end_s),
                },
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Means over the training samples of the epoch.
    pub total_loss: f64,
    pub kl_loss: f64,
    pub spatial_loss: f64,
    pub train_miou: Option<f64>,
    pub val_miou: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: RunConfig,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept; `None` keeps the initial parameters.
    pub best_epoch: Option<usize>,
    pub best_val_miou: Option<f64>,
}

impl TrainLog {
    /// Equality on every logged number except wall-clock time.
    pub fn same_results(&self, other: &TrainLog) -> bool {
        let strip = |l: &TrainLog| {
            let mut l = l.clone();
            l.epochs.iter_mut().for_each(|e| e.wall_seconds = 0.0);
            l
        };
        strip(self) == strip(other)
    }
}

pub struct TrainOutcome {
    /// Holds the best parameters, as written to the checkpoint.
    pub model: Model,
    pub vocab: Vocabulary,
    pub log: TrainLog,
}

/// Per-(epoch, sample) random streams so results do not depend on how
/// samples are scheduled across threads.
pub(crate) fn stream_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut x = seed;
    for &p in parts {
        x = splitmix(x ^ splitmix(p));
    }
    x
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn check_dataset_dims(config: &RunConfig, data: &Dataset) -> Result<()> {
    let (m, c) = (&data.manifest, &config.model);
    if m.d_v != c.d_v || m.d_o != c.d_o {
        return Err(Error::Config(format!(
            "dataset has d_v={}, d_o={} but the model expects d_v={}, d_o={}",
            m.d_v, m.d_o, c.d_v, c.d_o
        )));
    }
    Ok(())
}

/// Fresh model for `config` over `vocab`, with word vectors loaded if configured.
pub fn init_model(config: &RunConfig, vocab: &Vocabulary) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::new(config.model_config(vocab.len()), &mut rng)?;
    if let Some(path) = &config.model.embeddings {
        if let Some(id) = model.params.id_of("text.embedding") {
            let n = load_embedding_file(path, vocab, model.params.get_mut(id))?;
            log::info!("loaded {n} word vectors from {}", path.display());
        }
    }
    Ok(model)
}

/// Summed gradients and loss totals of one mini-batch.
pub struct BatchResult {
    pub grads: ParamGrads,
    pub total: f64,
    pub kl: f64,
    pub spatial: f64,
}

fn sample_gradients(model: &Model, sample: &SampleInput, seed: u64) -> Result<BatchResult> {
    let tape = Tape::new();
    let b = Binder::new(&tape, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let loss = model.loss(&b, sample, Some(&mut rng))?;
    let grads = b.collect(&tape.backward(loss.total)?);
    Ok(BatchResult {
        total: loss.total.value().item(),
        kl: loss.kl,
        spatial: loss.spatial,
        grads,
    })
}

/// Each sample runs on its own tape with its own dropout stream, `seed(i)`
/// for the sample at batch position `i`; gradients are summed in batch order.
pub fn batch_gradients<S>(model: &Model, batch: &[&SampleInput], seed: S, par: Parallelism) -> Result<BatchResult>
where
    S: Fn(usize) -> u64 + Sync + Send,
{
    let results = par.map(batch, |i, s| sample_gradients(model, s, seed(i)));
    let mut acc = BatchResult {
        grads: ParamGrads::zeros_like(&model.params),
        total: 0.0,
        kl: 0.0,
        spatial: 0.0,
    };
    for r in results {
        let r = r?;
        acc.grads.add_assign(&r.grads);
        acc.total += r.total;
        acc.kl += r.kl;
        acc.spatial += r.spatial;
    }
    Ok(acc)
}

pub fn train(config: &RunConfig, data: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    check_dataset_dims(config, data)?;
    if data.train.is_empty() {
        return Err(Error::Load("training split is empty".into()));
    }
    let vocab = build_vocabulary(&data.train);
    let mut model = init_model(config, &vocab)?;
    let smoothing = config.loss.smoothing();
    let train_set = prepare_samples(&model, &vocab, &data.train, smoothing)?;
    let val_set = prepare_samples(&model, &vocab, &data.val, smoothing)?;
    let par = config.train.parallelism;
    let eval_cfg = &config.eval;

    let mut adam = Adam::new(config.optimizer.adam(), &model.params);
    let mut best: Option<(usize, f64, ParamSet)> = None;
    let mut epochs = Vec::with_capacity(config.train.epochs);

    for epoch in 1..=config.train.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(config.seed, &[epoch as u64])));
        let (mut total, mut kl, mut spatial) = (0.0, 0.0, 0.0);

        for (step, batch) in order.chunks(config.train.batch_size).enumerate() {
            let inputs: Vec<&SampleInput> = batch.iter().map(|&i| &train_set[i].input).collect();
            let seed = |i: usize| stream_seed(config.seed, &[epoch as u64, batch[i] as u64, 1]);
            let r = batch_gradients(&model, &inputs, seed, par).map_err(|e| at_step(e, epoch, step))?;
            total += r.total;
            kl += r.kl;
            spatial += r.spatial;
            adam.step(&mut model.params, &r.grads).map_err(|e| at_step(e, epoch, step))?;
        }

        let n = train_set.len() as f64;
        let evaluate_now = epoch % config.train.eval_every == 0 || epoch == config.train.epochs;
        let (train_miou, val_miou) = if evaluate_now {
            let tr = evaluate(&model, &train_set, &eval_cfg.alphas, eval_cfg.swap_degenerate, par)?.report.miou;
            let va = if val_set.is_empty() {
                None
            } else {
                Some(evaluate(&model, &val_set, &eval_cfg.alphas, eval_cfg.swap_degenerate, par)?.report.miou)
            };
            (Some(tr), va)
        } else {
            (None, None)
        };
        if let Some(score) = val_miou.or(train_miou) {
            if best.as_ref().is_none_or(|b| score > b.1) {
                best = Some((epoch, score, model.params.clone()));
            }
        }
        let entry = EpochLog {
            epoch,
            total_loss: total / n,
            kl_loss: kl / n,
            spatial_loss: spatial / n,
            train_miou,
            val_miou,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (kl {:.4}, spatial {:.4}) train mIoU {} val mIoU {}",
            entry.total_loss,
            entry.kl_loss,
            entry.spatial_loss,
            fmt_opt(train_miou),
            fmt_opt(val_miou)
        );
        epochs.push(entry);
    }

    let (best_epoch, best_val_miou) = match best {
        Some((epoch, _, params)) => {
            model.params = params;
            let logged = &epochs[epoch - 1];
            (Some(epoch), logged.val_miou)
        }
        None => (None, None),
    };
    if let Some(path) = &config.paths.checkpoint {
        checkpoint::save(path, &model.params)?;
    }
    let log = TrainLog {
        config: config.clone(),
        epochs,
        best_epoch,
        best_val_miou,
    };
    if let Some(path) = &config.paths.train_log {
        let text = serde_json::to_string_pretty(&log).expect("log serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(TrainOutcome { model, vocab, log })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.2}"))
}

fn at_step(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::Training(msg) => Error::Training(format!("epoch {epoch}, step {step}: {msg}")),
        e @ Error::Domain { .. } => Error::Training(format!("epoch {epoch}, step {step}: {e}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SyntheticSpec};

    fn tiny_run(epochs: usize) -> (RunConfig, Dataset) {
        let mut config = RunConfig::synthetic_default();
        config.train.epochs = epochs;
        config.model.latent = 8;
        config.model.hidden = 6;
        config.model.text_hidden = Some(4);
        config.model.d_w = 6;
        let spec = SyntheticSpec {
            n_samples: 20,
            t_min: 12,
            t_max: 14,
            ..SyntheticSpec::default()
        };
        (config, generate(&spec).unwrap().to_dataset().unwrap())
    }

    #[test]
    fn zero_epochs_keep_initial_parameters() {
        let (config, data) = tiny_run(0);
        let out = train(&config, &data).unwrap();
        assert!(out.log.epochs.is_empty());
        assert_eq!(out.log.best_epoch, None);
        let fresh = init_model(&config, &out.vocab).unwrap();
        assert_eq!(fresh.params, out.model.params);
    }

    #[test]
    fn logs_are_finite_and_epochs_increase() {
        let (config, data) = tiny_run(3);
        let out = train(&config, &data).unwrap();
        let e: Vec<usize> = out.log.epochs.iter().map(|e| e.epoch).collect();
        assert_eq!(e, [1, 2, 3]);
        for ep in &out.log.epochs {
            assert!(ep.total_loss.is_finite() && ep.kl_loss.is_finite() && ep.spatial_loss.is_finite());
            assert!((ep.total_loss - ep.kl_loss - ep.spatial_loss).abs() < 1e-9);
            assert!(ep.val_miou.is_some());
        }
        let best = out.log.best_epoch.unwrap();
        let best_val = out.log.epochs[best - 1].val_miou.unwrap();
        assert!(out.log.epochs.iter().all(|e| e.val_miou.unwrap() <= best_val));
    }

    #[test]
    fn sequential_and_parallel_runs_agree() {
        let (mut config, data) = tiny_run(2);
        let a = train(&config, &data).unwrap();
        config.train.parallelism = crate::parallel::Parallelism::Sequential;
        let b = train(&config, &data).unwrap();
        assert_eq!(a.model.params, b.model.params);
        let mut la = a.log.clone();
        la.config.train.parallelism = config.train.parallelism;
        assert!(la.same_results(&b.log));
    }

    #[test]
    fn dimension_mismatch_is_a_config_error() {
        let (mut config, data) = tiny_run(1);
        config.model.d_v = 3;
        assert!(matches!(train(&config, &data), Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_loss_aborts_with_its_epoch() {
        let (mut config, data) = tiny_run(2);
        config.optimizer.lr = 1e300;
        config.optimizer.weight_decay = 0.0;
        match train(&config, &data) {
            Err(Error::Training(msg)) => assert!(msg.starts_with("epoch "), "{msg}"),
            Err(other) => panic!("expected a training error, got {other}"),
            Ok(_) => panic!("training with lr=1e300 should diverge"),
        }
    }

    #[test]
    fn stream_seeds_differ() {
        let a = stream_seed(1, &[1, 2]);
        assert_ne!(a, stream_seed(1, &[2, 1]));
        assert_ne!(a, stream_seed(2, &[1, 2]));
        assert_eq!(a, stream_seed(1, &[1, 2]));
    }
}
