//! Subcommand bodies: resolve inputs from the config, run, write reports.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ablate::{ablate, default_settings, AblationReport};
use super::config::RunConfig;
use super::eval::{evaluate, predictions_jsonl, PredictionRecord};
use super::gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
use super::train::{build_vocabulary, check_dataset_dims, init_model, prepare_samples, train, TrainLog};
use crate::autodiff::checkpoint;
use crate::data::{load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::spatial::GraphVariant;
use crate::synth::generate;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[default]
    Val,
}

/// Written by `eval`; the resolved config travels with the numbers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub config: RunConfig,
    pub split: Split,
    pub checkpoint: PathBuf,
    pub report: EvalReport,
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value).expect("report serializes"))
}

/// Generates the synthetic dataset into `paths.dataset`.
pub fn cmd_synth(config: &RunConfig) -> Result<PathBuf> {
    let dir = config.require_path(&config.paths.dataset, "dataset")?;
    let mut spec = config.synthetic.clone();
    spec.seed = config.seed;
    generate(&spec)?.write(dir)?;
    Ok(dir.to_path_buf())
}

pub fn load_configured_dataset(config: &RunConfig) -> Result<Dataset> {
    load_dataset(config.require_path(&config.paths.dataset, "dataset")?)
}

pub fn cmd_train(config: &RunConfig) -> Result<TrainLog> {
    let data = load_configured_dataset(config)?;
    Ok(train(config, &data)?.log)
}

/// Rebuilds the model from the dataset's training vocabulary and loads the
/// checkpoint into it.
pub fn cmd_eval(config: &RunConfig, split: Split) -> Result<(EvalOutput, Vec<PredictionRecord>)> {
    config.validate()?;
    let data = load_configured_dataset(config)?;
    check_dataset_dims(config, &data)?;
    let ckpt = config.require_path(&config.paths.checkpoint, "checkpoint")?;
    let vocab = build_vocabulary(&data.train);
    let mut model = init_model(config, &vocab)?;
    model.params.load_from(&checkpoint::load(ckpt)?)?;
    let samples = match split {
        Split::Train => &data.train,
        Split::Val => &data.val,
    };
    let prepared = prepare_samples(&model, &vocab, samples, config.loss.smoothing())?;
    let ev = evaluate(&model, &prepared, &config.eval.alphas, config.eval.swap_degenerate, config.train.parallelism)?;
    let out = EvalOutput {
        config: config.clone(),
        split,
        checkpoint: ckpt.to_path_buf(),
        report: ev.report,
    };
    if let Some(path) = &config.paths.report {
        write_json(path, &out)?;
        write_text(&path.with_extension("csv"), &out.report.ious_csv())?;
    }
    if let Some(path) = &config.paths.predictions {
        write_text(path, &predictions_jsonl(&ev.predictions))?;
    }
    Ok((out, ev.predictions))
}

/// Checks the configured variant; `full` also covers `single_query`.
pub fn cmd_gradcheck(config: &RunConfig) -> Result<Vec<GradcheckReport>> {
    let variants = match config.graph.variant {
        GraphVariant::Full => vec![GraphVariant::Full, GraphVariant::SingleQuery],
        v => vec![v],
    };
    let reports = variants
        .into_iter()
        .map(|variant| {
            gradcheck(&GradcheckOptions {
                variant,
                iterations: config.graph.iterations.min(2),
                seed: config.seed,
                ..GradcheckOptions::default()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(path) = &config.paths.report {
        write_json(path, &reports)?;
    }
    Ok(reports)
}

pub fn cmd_ablate(config: &RunConfig) -> Result<AblationReport> {
    let data = load_configured_dataset(config)?;
    let report = ablate(config, &data, &default_settings(config.graph.iterations))?;
    if let Some(path) = &config.paths.report {
        write_json(path, &report)?;
        write_text(&path.with_extension("csv"), &report.to_csv())?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SyntheticSpec;

    fn small_config(dir: &Path) -> RunConfig {
        let mut c = RunConfig::synthetic_default();
        c.synthetic = SyntheticSpec {
            n_samples: 20,
            ..SyntheticSpec::default()
        };
        c.train.epochs = 2;
        c.paths.dataset = Some(dir.join("data"));
        c.paths.checkpoint = Some(dir.join("model.ckpt"));
        c.paths.train_log = Some(dir.join("train_log.json"));
        c.paths.report = Some(dir.join("out/report.json"));
        c.paths.predictions = Some(dir.join("out/predictions.jsonl"));
        c
    }

    #[test]
    fn synth_train_eval_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = small_config(dir.path());
        cmd_synth(&c).unwrap();
        let log = cmd_train(&c).unwrap();
        let logged: TrainLog = serde_json::from_str(&std::fs::read_to_string(dir.path().join("train_log.json")).unwrap()).unwrap();
        assert_eq!(logged, log);
        let best = log.best_epoch.unwrap();
        let (out, preds) = cmd_eval(&c, Split::Train).unwrap();
        assert_eq!(Some(out.report.miou), log.epochs[best - 1].train_miou);
        let (val, _) = cmd_eval(&c, Split::Val).unwrap();
        assert_eq!(Some(val.report.miou), log.best_val_miou);
        let written: EvalOutput = serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/report.json")).unwrap()).unwrap();
        assert_eq!(written, val);
        assert_eq!(written.config, c);
        let csv = std::fs::read_to_string(dir.path().join("out/report.csv")).unwrap();
        assert_eq!(csv.lines().count(), val.report.n_samples + 1);
        assert_eq!(preds.len(), out.report.n_samples);
    }

    #[test]
    fn checkpoint_of_another_shape_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small_config(dir.path());
        cmd_synth(&c).unwrap();
        cmd_train(&c).unwrap();
        c.model.latent += 1;
        assert!(matches!(cmd_eval(&c, Split::Val), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn missing_dataset_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let c = small_config(dir.path());
        let err = cmd_train(&c).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{err}");
        let mut unset = c.clone();
        unset.paths.dataset = None;
        assert!(matches!(cmd_train(&unset), Err(Error::Config(_))));
    }
}
