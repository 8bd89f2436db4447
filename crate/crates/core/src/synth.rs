//! Synthetic datasets with planted, query-specific moments.
//!
//! Every video hosts several moments, each tied to a distinct (action,
//! object) pair. Inside a moment the activity features carry the pair's
//! direction on top of Gaussian noise and the paired object shows up in the
//! keyframe detections; outside, only noise, people and distractor objects
//! remain. Telling the moments of one video apart therefore needs the query.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{frames_from_detections, AnnotatedSample, AnnotationRecord, Dataset, DatasetManifest, LoadOptions, Splits, VideoData};
use crate::error::{Error, Result};
use crate::text::tokenize;
use crate::visual::{select_keyframe, ActivityFeatures, CategoryMap, Detection, KeyframeDetections, NodeCategory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    /// Train and validation samples together.
    pub n_samples: usize,
    pub val_fraction: f64,
    pub t_min: usize,
    pub t_max: usize,
    pub d_v: usize,
    pub d_o: usize,
    pub actions: Vec<String>,
    pub objects: Vec<String>,
    pub distractors: Vec<String>,
    pub signal_strength: f64,
    pub noise_std: f64,
    pub moments_min: usize,
    pub moments_max: usize,
    pub min_moment_len: usize,
    pub stride_seconds: f64,
    pub frames_per_feature: usize,
    pub frame_size: usize,
    /// Distractor detections per keyframe.
    pub clutter: usize,
    pub top_n: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let words = |w: &[&str]| w.iter().map(|s| s.to_string()).collect();
        SyntheticSpec {
            n_samples: 250,
            val_fraction: 0.2,
            t_min: 12,
            t_max: 32,
            d_v: 16,
            d_o: 16,
            actions: words(&["opens", "closes", "holds", "washes", "throws", "takes"]),
            objects: words(&["door", "cup", "book", "laptop", "towel", "phone"]),
            distractors: words(&["chair", "table", "wall", "floor", "window"]),
            signal_strength: 2.0,
            noise_std: 0.5,
            moments_min: 2,
            moments_max: 3,
            min_moment_len: 3,
            stride_seconds: 1.0,
            frames_per_feature: 4,
            frame_size: 8,
            clutter: 2,
            top_n: 15,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.t_min < 4 || self.t_max < self.t_min {
            return fail(format!("t range [{}, {}] must start at 4 or more", self.t_min, self.t_max));
        }
        if !(self.signal_strength >= 0.0) || !(self.noise_std >= 0.0) {
            return fail("signal_strength and noise_std must be non-negative".into());
        }
        if self.moments_min == 0 || self.moments_max < self.moments_min {
            return fail("moments per video must be a non-empty range".into());
        }
        if self.moments_max * self.min_moment_len > self.t_min || self.min_moment_len == 0 {
            return fail(format!(
                "{} moments of {} positions do not fit in {} positions",
                self.moments_max, self.min_moment_len, self.t_min
            ));
        }
        if self.actions.len().min(self.objects.len()) < self.moments_max {
            return fail("each moment of a video needs its own action and object".into());
        }
        if self.d_v == 0 || self.d_o == 0 || self.frames_per_feature == 0 || self.frame_size < 3 || self.top_n == 0 {
            return fail("dimensions, frames_per_feature and top_n must be positive; frame_size at least 3".into());
        }
        if !(self.stride_seconds > 0.0) || !(0.0..1.0).contains(&self.val_fraction) {
            return fail("stride must be positive and val_fraction in [0, 1)".into());
        }
        Ok(())
    }

    pub fn n_val(&self) -> usize {
        (self.n_samples as f64 * self.val_fraction).round() as usize
    }
}

/// A generated dataset in both its file form and its loaded form.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub manifest: DatasetManifest,
    pub categories: CategoryMap,
    pub annotations: Vec<AnnotationRecord>,
    pub videos: BTreeMap<String, (ActivityFeatures, Vec<KeyframeDetections>)>,
    /// Index into `actions` for every annotation, in annotation order.
    pub action_of: Vec<usize>,
}

pub const HUMAN_LABELS: [&str; 2] = ["person", "man"];

struct Planted {
    start: usize,
    len: usize,
    action: usize,
    object: usize,
}

fn unit_vector<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    let v: Vec<f64> = (0..d).map(|_| n.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn box_blur(img: &Tensor) -> Tensor {
    let (h, w) = img.dims2().expect("matrix");
    let mut out = Tensor::zeros(&[h, w]);
    for r in 0..h {
        for c in 0..w {
            let (mut s, mut n) = (0.0, 0.0);
            for dr in r.saturating_sub(1)..(r + 2).min(h) {
                for dc in c.saturating_sub(1)..(c + 2).min(w) {
                    s += img.get(dr, dc);
                    n += 1.0;
                }
            }
            out.data_mut()[r * w + c] = s / n;
        }
    }
    out
}

/// Frames of one feature window: one sharp frame, the rest blurred copies of
/// random texture. Returns the frame the sharpness score selects.
fn pick_keyframe<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<usize> {
    let sharp = rng.random_range(0..spec.frames_per_feature);
    let frames: Vec<Tensor> = (0..spec.frames_per_feature)
        .map(|i| {
            let img = Tensor::uniform(&[spec.frame_size, spec.frame_size], 0.0, 1.0, rng);
            if i == sharp {
                img
            } else {
                box_blur(&box_blur(&img))
            }
        })
        .collect();
    select_keyframe(&frames)
}

/// Non-overlapping spans of at least `min_len` positions, in random order.
fn place_moments<R: Rng + ?Sized>(t: usize, k: usize, min_len: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let max_len = (t / k).max(min_len);
    let mut lens: Vec<usize> = (0..k).map(|_| rng.random_range(min_len..=max_len)).collect();
    while lens.iter().sum::<usize>() > t {
        let i = (0..k).max_by_key(|&i| lens[i]).expect("k > 0");
        lens[i] -= 1;
    }
    let free = t - lens.iter().sum::<usize>();
    let mut cuts: Vec<usize> = (0..k).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut spans = Vec::with_capacity(k);
    let mut pos = 0;
    let mut prev_cut = 0;
    for (len, cut) in lens.into_iter().zip(cuts) {
        pos += cut - prev_cut;
        prev_cut = cut;
        spans.push((pos, len));
        pos += len;
    }
    spans.shuffle(rng);
    spans
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let action_dirs: Vec<Vec<f64>> = spec.actions.iter().map(|_| unit_vector(spec.d_v, &mut rng)).collect();
    let object_dirs: Vec<Vec<f64>> = spec.objects.iter().map(|_| unit_vector(spec.d_v, &mut rng)).collect();
    let object_looks: Vec<Vec<f64>> = spec.objects.iter().map(|_| unit_vector(spec.d_o, &mut rng)).collect();
    let distractor_looks: Vec<Vec<f64>> = spec.distractors.iter().map(|_| unit_vector(spec.d_o, &mut rng)).collect();
    let human_look = unit_vector(spec.d_o, &mut rng);

    let mut categories = CategoryMap::default();
    for h in HUMAN_LABELS {
        categories.0.insert(h.to_string(), NodeCategory::Human);
    }
    for o in spec.objects.iter().chain(&spec.distractors) {
        categories.0.insert(o.clone(), NodeCategory::Object);
    }

    let n_val = spec.n_val();
    let n_train = spec.n_samples - n_val;
    let mut annotations = Vec::with_capacity(spec.n_samples);
    let mut action_of = Vec::with_capacity(spec.n_samples);
    let mut videos = BTreeMap::new();
    let mut splits = Splits::default();
    // The action dominates the pair direction; the object shifts it.
    let (w_action, w_object) = (2.0 / 5f64.sqrt(), 1.0 / 5f64.sqrt());

    for (split_len, is_val) in [(n_train, false), (n_val, true)] {
        let mut produced = 0;
        while produced < split_len {
            let video_id = format!("vid{:05}", videos.len());
            let t = rng.random_range(spec.t_min..=spec.t_max);
            let k = rng.random_range(spec.moments_min..=spec.moments_max);
            let mut actions: Vec<usize> = (0..spec.actions.len()).collect();
            let mut objects: Vec<usize> = (0..spec.objects.len()).collect();
            actions.shuffle(&mut rng);
            objects.shuffle(&mut rng);
            let planted: Vec<Planted> = place_moments(t, k, spec.min_moment_len, &mut rng)
                .into_iter()
                .zip(actions.into_iter().zip(objects))
                .map(|((start, len), (action, object))| Planted { start, len, action, object })
                .collect();

            let mut feats = vec![0.0; t * spec.d_v];
            for x in feats.iter_mut() {
                *x = noise.sample(&mut rng);
            }
            for m in &planted {
                for pos in m.start..m.start + m.len {
                    for d in 0..spec.d_v {
                        let dir = w_action * action_dirs[m.action][d] + w_object * object_dirs[m.object][d];
                        feats[pos * spec.d_v + d] += spec.signal_strength * dir;
                    }
                }
            }
            let duration = t as f64 * spec.stride_seconds;
            let features = ActivityFeatures::new(video_id.clone(), Tensor::matrix(t, spec.d_v, feats)?, spec.stride_seconds, duration)?;

            let mut detections = Vec::with_capacity(t);
            for pos in 0..t {
                let noisy = |look: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> { look.iter().map(|v| v + noise.sample(rng)).collect() };
                let mut dets = vec![Detection {
                    label: HUMAN_LABELS.choose(&mut rng).expect("labels").to_string(),
                    confidence: rng.random_range(0.8..1.0),
                    feature: noisy(&human_look, &mut rng),
                }];
                for _ in 0..spec.clutter.min(spec.distractors.len()) {
                    let i = rng.random_range(0..spec.distractors.len());
                    dets.push(Detection {
                        label: spec.distractors[i].clone(),
                        confidence: rng.random_range(0.3..0.9),
                        feature: noisy(&distractor_looks[i], &mut rng),
                    });
                }
                if spec.signal_strength > 0.0 {
                    for m in planted.iter().filter(|m| (m.start..m.start + m.len).contains(&pos)) {
                        dets.push(Detection {
                            label: spec.objects[m.object].clone(),
                            confidence: rng.random_range(0.9..1.0),
                            feature: noisy(&object_looks[m.object], &mut rng),
                        });
                    }
                }
                dets.shuffle(&mut rng);
                let frame = pick_keyframe(spec, &mut rng)?;
                detections.push(KeyframeDetections {
                    video_id: video_id.clone(),
                    frame_index: pos * spec.frames_per_feature + frame,
                    detections: dets,
                });
            }

            for m in planted.iter().take(split_len - produced) {
                annotations.push(AnnotationRecord {
                    video_id: video_id.clone(),
                    query: format!("person {} the {}", spec.actions[m.action], spec.objects[m.object]),
                    t_start_s: m.start as f64 * spec.stride_seconds,
                    t_end_s: (m.start + m.len) as f64 * spec.stride_seconds,
                    duration_s: duration,
                });
                action_of.push(m.action);
                produced += 1;
            }
            if is_val { &mut splits.val } else { &mut splits.train }.push(video_id.clone());
            videos.insert(video_id, (features, detections));
        }
    }

    let mut manifest = DatasetManifest::with_defaults(spec.frames_per_feature, spec.top_n, spec.d_v, spec.d_o, splits);
    manifest.synthetic = Some(serde_json::to_value(spec).expect("spec serializes"));
    Ok(SyntheticDataset {
        spec: spec.clone(),
        manifest,
        categories,
        annotations,
        videos,
        action_of,
    })
}

impl SyntheticDataset {
    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            features_dir: self.manifest.features_dir.clone(),
            detections_dir: self.manifest.detections_dir.clone(),
            categories: self.categories.clone(),
            frames_per_feature: self.manifest.frames_per_feature,
            top_n: self.manifest.top_n,
            d_o: self.manifest.d_o,
        }
    }

    /// The in-memory dataset, built with the same routing the file loader uses.
    pub fn to_dataset(&self) -> Result<Dataset> {
        let opts = self.load_options();
        let mut loaded: BTreeMap<&str, Arc<VideoData>> = BTreeMap::new();
        for (id, (features, dets)) in &self.videos {
            let frames = frames_from_detections(dets, features.len(), &opts)?;
            loaded.insert(
                id,
                Arc::new(VideoData {
                    features: features.clone(),
                    frames,
                }),
            );
        }
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for a in &self.annotations {
            let sample = AnnotatedSample {
                video_id: a.video_id.clone(),
                query: a.query.clone(),
                tokens: tokenize(&a.query),
                t_start_s: a.t_start_s,
                t_end_s: a.t_end_s,
                duration_s: a.duration_s,
                video: loaded[a.video_id.as_str()].clone(),
            };
            if self.manifest.splits.val.contains(&a.video_id) {
                val.push(sample);
            } else {
                train.push(sample);
            }
        }
        Ok(Dataset {
            manifest: self.manifest.clone(),
            categories: self.categories.clone(),
            train,
            val,
        })
    }

    pub fn write(&self, dir: &std::path::Path) -> Result<()> {
        crate::data::write_dataset(dir, &self.manifest, &self.categories, &self.annotations, &self.videos)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_dataset;

    fn small(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_samples: 40,
            seed,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn sizes_and_invariants() {
        let ds = generate(&SyntheticSpec::default()).unwrap().to_dataset().unwrap();
        assert_eq!((ds.train.len(), ds.val.len()), (200, 50));
        for s in ds.train.iter().chain(&ds.val) {
            assert!(0.0 <= s.t_start_s && s.t_start_s < s.t_end_s && s.t_end_s <= s.duration_s);
            let t = s.video.features.len();
            assert!((12..=32).contains(&t));
            assert_eq!(s.video.frames.len(), t);
            assert_eq!(s.tokens.len(), 4);
        }
        let m = &ds.manifest.splits;
        assert!(m.train.iter().all(|id| !m.val.contains(id)));
    }

    #[test]
    fn videos_host_several_distinct_moments() {
        let g = generate(&small(1)).unwrap();
        let mut per_video: BTreeMap<&str, Vec<&AnnotationRecord>> = BTreeMap::new();
        for a in &g.annotations {
            per_video.entry(&a.video_id).or_default().push(a);
        }
        let multi = per_video.values().filter(|v| v.len() >= 2).count();
        assert!(multi * 2 > per_video.len());
        for moments in per_video.values() {
            for (i, a) in moments.iter().enumerate() {
                for b in &moments[i + 1..] {
                    assert_ne!(a.query, b.query);
                    assert!(a.t_end_s <= b.t_start_s || b.t_end_s <= a.t_start_s);
                }
            }
        }
    }

    #[test]
    fn paired_object_appears_only_inside_its_moment() {
        let g = generate(&small(2)).unwrap();
        for a in &g.annotations {
            let object = a.query.rsplit(' ').next().unwrap();
            let (features, dets) = &g.videos[&a.video_id];
            for rec in dets {
                let pos = rec.frame_index / g.spec.frames_per_feature;
                let time = pos as f64 * features.stride_seconds;
                let inside = time >= a.t_start_s && time < a.t_end_s;
                assert_eq!(rec.detections.iter().any(|d| d.label == object), inside);
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate(&small(3)).unwrap().write(a.path()).unwrap();
        generate(&small(3)).unwrap().write(b.path()).unwrap();
        for entry in walk(a.path()) {
            let rel = entry.strip_prefix(a.path()).unwrap();
            assert_eq!(std::fs::read(&entry).unwrap(), std::fs::read(b.path().join(rel)).unwrap(), "{}", rel.display());
        }
    }

    fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn written_dataset_loads_back_bit_for_bit() {
        let g = generate(&small(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        g.write(dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        let memory = g.to_dataset().unwrap();
        assert_eq!(loaded.train.len(), memory.train.len());
        assert_eq!(loaded.val.len(), memory.val.len());
        for (x, y) in loaded.train.iter().chain(&loaded.val).zip(memory.train.iter().chain(&memory.val)) {
            assert_eq!(x, y);
        }
        assert_eq!(loaded.manifest, memory.manifest);
    }

    fn span_means(g: &SyntheticDataset) -> Vec<(usize, Vec<f64>, bool)> {
        let val = &g.manifest.splits.val;
        g.annotations
            .iter()
            .zip(&g.action_of)
            .map(|(a, &action)| {
                let f = &g.videos[&a.video_id].0;
                let (s, e) = ((a.t_start_s / f.stride_seconds) as usize, (a.t_end_s / f.stride_seconds) as usize);
                let mut mean = vec![0.0; f.dim()];
                for r in s..e {
                    for (m, x) in mean.iter_mut().zip(f.features.row_slice(r)) {
                        *m += x / (e - s) as f64;
                    }
                }
                (action, mean, val.contains(&a.video_id))
            })
            .collect()
    }

    fn centroid_accuracy(g: &SyntheticDataset) -> f64 {
        let rows = span_means(g);
        let n_actions = g.spec.actions.len();
        let d = g.spec.d_v;
        let mut centroids = vec![vec![0.0; d]; n_actions];
        let mut counts = vec![0.0; n_actions];
        for (a, m, is_val) in &rows {
            if !is_val {
                counts[*a] += 1.0;
                for (c, x) in centroids[*a].iter_mut().zip(m) {
                    *c += x;
                }
            }
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|x| *x /= n);
        }
        let test: Vec<_> = rows.iter().filter(|r| r.2).collect();
        let correct = test
            .iter()
            .filter(|(a, m, _)| {
                let dist = |c: &Vec<f64>| c.iter().zip(m).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
                let best = (0..n_actions).min_by(|&i, &j| dist(&centroids[i]).total_cmp(&dist(&centroids[j]))).unwrap();
                best == *a
            })
            .count();
        correct as f64 / test.len() as f64
    }

    #[test]
    fn planted_signal_is_recoverable_by_nearest_centroid() {
        let spec = SyntheticSpec {
            n_samples: 1000,
            ..SyntheticSpec::default()
        };
        let acc = centroid_accuracy(&generate(&spec).unwrap());
        assert!(acc > 0.95, "accuracy {acc}");
    }

    #[test]
    fn null_spec_carries_no_signal() {
        let spec = SyntheticSpec {
            n_samples: 1000,
            signal_strength: 0.0,
            ..SyntheticSpec::default()
        };
        let g = generate(&spec).unwrap();
        let acc = centroid_accuracy(&g);
        assert!(acc < 0.35, "accuracy {acc}");
        for (_, dets) in g.videos.values() {
            for rec in dets {
                assert!(rec.detections.iter().all(|d| !spec.objects.contains(&d.label)));
            }
        }
    }

    #[test]
    fn planted_keyframe_is_selected() {
        let spec = SyntheticSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let mut probe = rng.clone();
            let sharp = probe.random_range(0..spec.frames_per_feature);
            assert_eq!(pick_keyframe(&spec, &mut rng).unwrap(), sharp);
        }
    }

    #[test]
    fn invalid_specs() {
        for bad in [
            SyntheticSpec { t_min: 3, ..SyntheticSpec::default() },
            SyntheticSpec { t_max: 5, ..SyntheticSpec::default() },
            SyntheticSpec { noise_std: -1.0, ..SyntheticSpec::default() },
            SyntheticSpec { moments_max: 9, ..SyntheticSpec::default() },
        ] {
            assert!(matches!(generate(&bad), Err(Error::Config(_))));
        }
    }
}
