//! Annotated query/moment tuples and the on-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.json        splits and loader settings
//! <dir>/annotations.jsonl    {"video_id","query","t_start_s","t_end_s","duration_s"}
//! <dir>/features/<id>.feat   activity features
//! <dir>/detections/<id>.jsonl  keyframe detections
//! <dir>/categories.json      label -> "human" | "object"
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::tokenize;
use crate::visual::{
    categorize_detections, read_detections, read_features, write_detections, write_features, ActivityFeatures, CategoryMap,
    FrameObservations, KeyframeDetections,
};

/// Features and per-position keyframe observations of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoData {
    pub features: ActivityFeatures,
    pub frames: Vec<FrameObservations>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedSample {
    pub video_id: String,
    pub query: String,
    pub tokens: Vec<String>,
    pub t_start_s: f64,
    pub t_end_s: f64,
    pub duration_s: f64,
    pub video: Arc<VideoData>,
}

/// One line of the annotation file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub video_id: String,
    pub query: String,
    pub t_start_s: f64,
    pub t_end_s: f64,
    pub duration_s: f64,
}

impl AnnotationRecord {
    fn validate(&self) -> std::result::Result<(), String> {
        let ok = self.t_start_s >= 0.0 && self.t_start_s < self.t_end_s && self.t_end_s <= self.duration_s;
        if !ok {
            return Err(format!(
                "moment [{}, {}] is not ordered inside a {}s video",
                self.t_start_s, self.t_end_s, self.duration_s
            ));
        }
        if tokenize(&self.query).is_empty() {
            return Err("query has no tokens".into());
        }
        Ok(())
    }
}

impl From<&AnnotatedSample> for AnnotationRecord {
    fn from(s: &AnnotatedSample) -> Self {
        AnnotationRecord {
            video_id: s.video_id.clone(),
            query: s.query.clone(),
            t_start_s: s.t_start_s,
            t_end_s: s.t_end_s,
            duration_s: s.duration_s,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Raw frames behind each activity feature; keyframe `f` belongs to position `f / frames_per_feature`.
    pub frames_per_feature: usize,
    pub top_n: usize,
    pub d_v: usize,
    pub d_o: usize,
    pub annotations: PathBuf,
    pub features_dir: PathBuf,
    pub detections_dir: PathBuf,
    pub categories: PathBuf,
    pub splits: Splits,
    /// Generator settings when the dataset is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<serde_json::Value>,
}

impl DatasetManifest {
    pub fn with_defaults(frames_per_feature: usize, top_n: usize, d_v: usize, d_o: usize, splits: Splits) -> Self {
        DatasetManifest {
            frames_per_feature,
            top_n,
            d_v,
            d_o,
            annotations: "annotations.jsonl".into(),
            features_dir: "features".into(),
            detections_dir: "detections".into(),
            categories: "categories.json".into(),
            splits,
            synthetic: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub categories: CategoryMap,
    pub train: Vec<AnnotatedSample>,
    pub val: Vec<AnnotatedSample>,
}

/// Where and how to join annotations with per-video files.
#[derive(Clone, Debug)]
pub struct LoadOptions {
    pub features_dir: PathBuf,
    pub detections_dir: PathBuf,
    pub categories: CategoryMap,
    pub frames_per_feature: usize,
    pub top_n: usize,
    pub d_o: usize,
}

pub fn feature_path(dir: &Path, video_id: &str) -> PathBuf {
    dir.join(format!("{video_id}.feat"))
}

pub fn detection_path(dir: &Path, video_id: &str) -> PathBuf {
    dir.join(format!("{video_id}.jsonl"))
}

/// Keyframe observations for every feature position; positions without a
/// detection record are empty.
pub fn frames_from_detections(records: &[KeyframeDetections], t: usize, opts: &LoadOptions) -> Result<Vec<FrameObservations>> {
    let mut frames: Vec<Option<FrameObservations>> = vec![None; t];
    for rec in records {
        let pos = rec.frame_index / opts.frames_per_feature.max(1);
        let slot = frames.get_mut(pos).ok_or_else(|| {
            Error::Load(format!(
                "{}: frame {} lies beyond the {t} feature windows",
                rec.video_id, rec.frame_index
            ))
        })?;
        if slot.is_some() {
            return Err(Error::Load(format!("{}: two keyframes for feature position {pos}", rec.video_id)));
        }
        *slot = Some(categorize_detections(&rec.detections, &opts.categories, opts.top_n, opts.d_o)?);
    }
    Ok(frames.into_iter().map(|f| f.unwrap_or_else(|| FrameObservations::empty(opts.d_o))).collect())
}

pub fn load_video(video_id: &str, opts: &LoadOptions) -> Result<VideoData> {
    let fpath = feature_path(&opts.features_dir, video_id);
    if !fpath.exists() {
        return Err(Error::Load(format!("no feature file for video {video_id} ({})", fpath.display())));
    }
    let features = read_features(&fpath)?;
    if features.video_id != video_id {
        return Err(Error::Load(format!("{} holds features for {:?}", fpath.display(), features.video_id)));
    }
    let dpath = detection_path(&opts.detections_dir, video_id);
    let records = if dpath.exists() {
        read_detections(&dpath)?
    } else {
        log::warn!("no detection file for video {video_id}; keyframes are empty");
        Vec::new()
    };
    let frames = frames_from_detections(&records, features.len(), opts)?;
    Ok(VideoData { features, frames })
}

pub fn read_annotation_records(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |detail: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail,
        };
        let rec: AnnotationRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        rec.validate().map_err(parse_err)?;
        out.push(rec);
    }
    Ok(out)
}

/// Parse annotations and join them with feature and detection files by video id.
/// Each video is loaded once and shared by all of its moments.
pub fn load_annotations(path: &Path, opts: &LoadOptions) -> Result<Vec<AnnotatedSample>> {
    let records = read_annotation_records(path)?;
    let mut videos: HashMap<String, Arc<VideoData>> = HashMap::new();
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let video = match videos.get(&rec.video_id) {
            Some(v) => v.clone(),
            None => {
                let v = Arc::new(load_video(&rec.video_id, opts)?);
                videos.insert(rec.video_id.clone(), v.clone());
                v
            }
        };
        out.push(AnnotatedSample {
            tokens: tokenize(&rec.query),
            video_id: rec.video_id,
            query: rec.query,
            t_start_s: rec.t_start_s,
            t_end_s: rec.t_end_s,
            duration_s: rec.duration_s,
            video,
        });
    }
    Ok(out)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        detail: e.to_string(),
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = read_json(&dir.join("manifest.json"))?;
    let categories = CategoryMap::load(&dir.join(&manifest.categories))?;
    let opts = LoadOptions {
        features_dir: dir.join(&manifest.features_dir),
        detections_dir: dir.join(&manifest.detections_dir),
        categories: categories.clone(),
        frames_per_feature: manifest.frames_per_feature,
        top_n: manifest.top_n,
        d_o: manifest.d_o,
    };
    let samples = load_annotations(&dir.join(&manifest.annotations), &opts)?;
    let train_ids: BTreeSet<&str> = manifest.splits.train.iter().map(String::as_str).collect();
    let val_ids: BTreeSet<&str> = manifest.splits.val.iter().map(String::as_str).collect();
    if let Some(id) = train_ids.intersection(&val_ids).next() {
        return Err(Error::Load(format!("video {id} is in both splits")));
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for s in samples {
        if s.video.features.dim() != manifest.d_v {
            return Err(Error::Load(format!(
                "video {} has {}-dimensional features, manifest says {}",
                s.video_id,
                s.video.features.dim(),
                manifest.d_v
            )));
        }
        if train_ids.contains(s.video_id.as_str()) {
            train.push(s);
        } else if val_ids.contains(s.video_id.as_str()) {
            val.push(s);
        } else {
            return Err(Error::Load(format!("video {} is not assigned to a split", s.video_id)));
        }
    }
    Ok(Dataset {
        manifest,
        categories,
        train,
        val,
    })
}

/// Write annotations, per-video feature and detection files, categories and
/// the manifest under `dir`.
pub fn write_dataset(
    dir: &Path,
    manifest: &DatasetManifest,
    categories: &CategoryMap,
    annotations: &[AnnotationRecord],
    videos: &BTreeMap<String, (ActivityFeatures, Vec<KeyframeDetections>)>,
) -> Result<()> {
    let create = |p: &Path| std::fs::File::create(p).map(BufWriter::new).map_err(|e| Error::io(p, e));
    for sub in [&manifest.features_dir, &manifest.detections_dir] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for (id, (features, detections)) in videos {
        let p = feature_path(&dir.join(&manifest.features_dir), id);
        write_features(create(&p)?, features).map_err(|e| Error::io(&p, e))?;
        let p = detection_path(&dir.join(&manifest.detections_dir), id);
        write_detections(create(&p)?, detections).map_err(|e| Error::io(&p, e))?;
    }
    let p = dir.join(&manifest.annotations);
    let mut w = create(&p)?;
    for a in annotations {
        let line = serde_json::to_string(a).expect("annotation serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(&p, e))?;
    }
    w.flush().map_err(|e| Error::io(&p, e))?;
    write_json(&dir.join(&manifest.categories), categories)?;
    write_json(&dir.join("manifest.json"), manifest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
