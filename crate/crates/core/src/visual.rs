//! Visual observations: activity features, keyframe sharpness, detection
//! routing into human/object sets, and the tanh node embeddings.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Binder, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::Linear;

/// Activity features for one video, one row per feature position.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivityFeatures {
    pub video_id: String,
    pub features: Tensor,
    pub stride_seconds: f64,
    pub duration_seconds: f64,
}

impl ActivityFeatures {
    pub fn new(video_id: impl Into<String>, features: Tensor, stride_seconds: f64, duration_seconds: f64) -> Result<Self> {
        let (t, _) = features.dims2()?;
        if t == 0 {
            return Err(Error::Input("activity features need at least one row".into()));
        }
        if !(stride_seconds > 0.0) {
            return Err(Error::Input(format!("stride must be positive, got {stride_seconds}")));
        }
        if (t as f64 * stride_seconds - duration_seconds).abs() > stride_seconds + 1e-9 {
            return Err(Error::Input(format!(
                "{t} features of {stride_seconds}s do not cover a {duration_seconds}s video"
            )));
        }
        Ok(ActivityFeatures {
            video_id: video_id.into(),
            features,
            stride_seconds,
            duration_seconds,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

const FEATURE_MAGIC: &[u8; 4] = b"FEAT";
const FEATURE_VERSION: u32 = 1;

/// `"FEAT" | version u32 | id_len u64 | id | t u64 | d_v u64 | stride f64 | duration f64 | t*d_v f64`,
/// little-endian throughout.
pub fn write_features<W: Write>(mut w: W, f: &ActivityFeatures) -> std::io::Result<()> {
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&(f.video_id.len() as u64).to_le_bytes())?;
    w.write_all(f.video_id.as_bytes())?;
    w.write_all(&(f.len() as u64).to_le_bytes())?;
    w.write_all(&(f.dim() as u64).to_le_bytes())?;
    w.write_all(&f.stride_seconds.to_le_bytes())?;
    w.write_all(&f.duration_seconds.to_le_bytes())?;
    for x in f.features.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()
}

pub fn read_features(path: &Path) -> Result<ActivityFeatures> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |what: &str| Error::Load(format!("{}: {what}", path.display()));
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated feature file"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != FEATURE_MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4"));
    if version != FEATURE_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let u64_at = |s: &[u8]| u64::from_le_bytes(s.try_into().expect("8"));
    let id_len = u64_at(take(8)?) as usize;
    let video_id = String::from_utf8(take(id_len)?.to_vec()).map_err(|_| bad("video id is not utf-8"))?;
    let t = u64_at(take(8)?) as usize;
    let d = u64_at(take(8)?) as usize;
    let stride = f64::from_le_bytes(take(8)?.try_into().expect("8"));
    let duration = f64::from_le_bytes(take(8)?.try_into().expect("8"));
    let n = t.checked_mul(d).ok_or_else(|| bad("implausible dimensions"))?;
    let data: Vec<f64> = take(n.checked_mul(8).ok_or_else(|| bad("implausible dimensions"))?)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
        .collect();
    ActivityFeatures::new(video_id, Tensor::matrix(t, d, data)?, stride, duration)
}

/// Population variance of the 4-neighbour Laplacian response over the valid
/// interior of a grayscale image.
pub fn variance_of_laplacian(image: &Tensor) -> Result<f64> {
    let (h, w) = image.dims2()?;
    if h < 3 || w < 3 {
        return Err(Error::Input(format!("image {h}x{w} is smaller than the 3x3 kernel")));
    }
    let px = |r: usize, c: usize| image.get(r, c);
    let mut responses = Vec::with_capacity((h - 2) * (w - 2));
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            responses.push(px(r - 1, c) + px(r + 1, c) + px(r, c - 1) + px(r, c + 1) - 4.0 * px(r, c));
        }
    }
    let n = responses.len() as f64;
    let mean = responses.iter().sum::<f64>() / n;
    Ok(responses.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n)
}

/// Index of the sharpest frame; ties go to the earliest.
pub fn select_keyframe(frames: &[Tensor]) -> Result<usize> {
    if frames.is_empty() {
        return Err(Error::Input("no frames to choose a keyframe from".into()));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, f) in frames.iter().enumerate() {
        let s = variance_of_laplacian(f)?;
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(best.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    pub confidence: f64,
    pub feature: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeCategory {
    Human,
    Object,
}

/// Label to node category. Labels not in the map are objects.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryMap(pub BTreeMap<String, NodeCategory>);

impl CategoryMap {
    pub fn category(&self, label: &str) -> NodeCategory {
        self.0.get(label).copied().unwrap_or(NodeCategory::Object)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            detail: e.to_string(),
        })
    }
}

/// Human and object observations at one keyframe.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameObservations {
    pub humans: Tensor,
    pub objects: Tensor,
    pub human_labels: Vec<String>,
    pub object_labels: Vec<String>,
}

impl FrameObservations {
    pub fn empty(d_o: usize) -> Self {
        FrameObservations {
            humans: Tensor::zeros(&[0, d_o]),
            objects: Tensor::zeros(&[0, d_o]),
            human_labels: Vec::new(),
            object_labels: Vec::new(),
        }
    }

    pub fn num_humans(&self) -> usize {
        self.humans.rows()
    }

    pub fn num_objects(&self) -> usize {
        self.objects.rows()
    }
}

/// Keep the `top_n` most confident detections (stable on ties) and route each
/// into the human or object set.
pub fn categorize_detections(dets: &[Detection], map: &CategoryMap, top_n: usize, d_o: usize) -> Result<FrameObservations> {
    if top_n == 0 {
        return Err(Error::Input("top_n must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    order.truncate(top_n);
    order.sort_unstable();

    let mut humans = Vec::new();
    let mut objects = Vec::new();
    let mut human_labels = Vec::new();
    let mut object_labels = Vec::new();
    for i in order {
        let d = &dets[i];
        if d.feature.len() != d_o {
            return Err(Error::dim("detection feature", &[d.feature.len()], &[d_o]));
        }
        match map.category(&d.label) {
            NodeCategory::Human => {
                humans.push(d.feature.clone());
                human_labels.push(d.label.clone());
            }
            NodeCategory::Object => {
                objects.push(d.feature.clone());
                object_labels.push(d.label.clone());
            }
        }
    }
    Ok(FrameObservations {
        humans: Tensor::from_rows(&humans, d_o)?,
        objects: Tensor::from_rows(&objects, d_o)?,
        human_labels,
        object_labels,
    })
}

/// One line of a detection file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyframeDetections {
    pub video_id: String,
    pub frame_index: usize,
    pub detections: Vec<Detection>,
}

pub fn write_detections<W: Write>(mut w: W, frames: &[KeyframeDetections]) -> std::io::Result<()> {
    for f in frames {
        serde_json::to_writer(&mut w, f)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_detections(path: &Path) -> Result<Vec<KeyframeDetections>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: KeyframeDetections = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        if let Some(d) = rec.detections.iter().find(|d| !(0.0..=1.0).contains(&d.confidence)) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                detail: format!("confidence {} outside [0, 1]", d.confidence),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// All keyframe observations of a video stacked row-wise, with the feature
/// position each row belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedObservations {
    pub humans: Tensor,
    pub human_step: Vec<usize>,
    pub objects: Tensor,
    pub object_step: Vec<usize>,
}

impl StackedObservations {
    pub fn num_humans(&self) -> usize {
        self.human_step.len()
    }

    pub fn num_objects(&self) -> usize {
        self.object_step.len()
    }

    pub fn from_frames(frames: &[FrameObservations], d_o: usize) -> Result<Self> {
        let mut humans = Vec::new();
        let mut objects = Vec::new();
        let mut human_step = Vec::new();
        let mut object_step = Vec::new();
        for (i, f) in frames.iter().enumerate() {
            for r in 0..f.num_humans() {
                humans.push(f.humans.row_slice(r).to_vec());
                human_step.push(i);
            }
            for r in 0..f.num_objects() {
                objects.push(f.objects.row_slice(r).to_vec());
                object_step.push(i);
            }
        }
        Ok(StackedObservations {
            humans: Tensor::from_rows(&humans, d_o)?,
            human_step,
            objects: Tensor::from_rows(&objects, d_o)?,
            object_step,
        })
    }
}

/// The node-specific embeddings `tanh(W x + b)` for activity, human and
/// object observations.
#[derive(Clone, Copy, Debug)]
pub struct NodeEmbedder {
    pub activity: Linear,
    pub human: Linear,
    pub object: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct EmbeddedNodes<'t> {
    pub activity: Var<'t>,
    pub humans: Var<'t>,
    pub objects: Var<'t>,
}

impl NodeEmbedder {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, d_v: usize, d_o: usize, latent: usize, rng: &mut R) -> Self {
        NodeEmbedder {
            activity: Linear::new(params, "embed.activity", d_v, latent, rng),
            human: Linear::new(params, "embed.human", d_o, latent, rng),
            object: Linear::new(params, "embed.object", d_o, latent, rng),
        }
    }

    pub fn embed<'t>(&self, b: &Binder<'t>, activity: &Tensor, humans: &Tensor, objects: &Tensor) -> Result<EmbeddedNodes<'t>> {
        let tape = b.tape();
        Ok(EmbeddedNodes {
            activity: self.activity.forward(b, tape.constant(activity.clone()))?.tanh(),
            humans: self.human.forward(b, tape.constant(humans.clone()))?.tanh(),
            objects: self.object.forward(b, tape.constant(objects.clone()))?.tanh(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn checkerboard(n: usize) -> Tensor {
        Tensor::matrix(n, n, (0..n * n).map(|i| ((i / n + i % n) % 2) as f64).collect()).unwrap()
    }

    fn box_blur(img: &Tensor) -> Tensor {
        let (h, w) = img.dims2().unwrap();
        let mut out = Tensor::zeros(&[h, w]);
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                let mut n = 0.0;
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                        if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                            acc += img.get(rr as usize, cc as usize);
                            n += 1.0;
                        }
                    }
                }
                out.data_mut()[r * w + c] = acc / n;
            }
        }
        out
    }

    #[test]
    fn constant_image_has_zero_variance() {
        assert_eq!(variance_of_laplacian(&Tensor::full(&[6, 7], 0.42)).unwrap(), 0.0);
    }

    #[test]
    fn checkerboard_is_sharper_than_its_blur() {
        let sharp = checkerboard(8);
        let blurred = box_blur(&sharp);
        let s = variance_of_laplacian(&sharp).unwrap();
        let b = variance_of_laplacian(&blurred).unwrap();
        assert!(s > b, "{s} vs {b}");
        // Interior responses alternate between -4 and +4.
        assert_eq!(s, 16.0);
    }

    #[test]
    fn single_bright_pixel() {
        let mut img = Tensor::zeros(&[5, 5]);
        img.data_mut()[12] = 1.0;
        // Valid 3x3 interior: centre -4, four neighbours +1, four corners 0.
        let vals = [-4.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let mean: f64 = vals.iter().sum::<f64>() / 9.0;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 9.0;
        assert!((variance_of_laplacian(&img).unwrap() - var).abs() < 1e-15);
    }

    #[test]
    fn tiny_image_is_rejected() {
        assert!(matches!(variance_of_laplacian(&Tensor::zeros(&[2, 5])), Err(Error::Input(_))));
    }

    #[test]
    fn keyframe_selection() {
        let sharp = checkerboard(6);
        let blurred = box_blur(&sharp);
        assert_eq!(select_keyframe(std::slice::from_ref(&sharp)).unwrap(), 0);
        assert_eq!(select_keyframe(&[blurred.clone(), sharp.clone(), blurred.clone()]).unwrap(), 1);
        assert_eq!(select_keyframe(&[sharp.clone(), sharp.clone(), sharp]).unwrap(), 0);
        assert!(select_keyframe(&[]).is_err());
    }

    fn det(label: &str, confidence: f64) -> Detection {
        Detection {
            label: label.into(),
            confidence,
            feature: vec![confidence; 2],
        }
    }

    fn humans_map() -> CategoryMap {
        CategoryMap([("hand".to_string(), NodeCategory::Human), ("person".to_string(), NodeCategory::Human)].into())
    }

    #[test]
    fn keeps_top_fifteen() {
        let dets: Vec<Detection> = (0..20).map(|i| det("cup", i as f64 / 20.0)).collect();
        let obs = categorize_detections(&dets, &CategoryMap::default(), 15, 2).unwrap();
        assert_eq!(obs.num_objects(), 15);
        let kept: Vec<f64> = (0..15).map(|r| obs.objects.get(r, 0)).collect();
        let expected: Vec<f64> = (5..20).map(|i| i as f64 / 20.0).collect();
        assert_eq!(kept, expected);
    }

    #[test]
    fn routing_and_degenerate_splits() {
        let obs = categorize_detections(&[det("hand", 0.9), det("table", 0.8)], &humans_map(), 15, 2).unwrap();
        assert_eq!((obs.num_humans(), obs.num_objects()), (1, 1));
        assert_eq!(obs.human_labels, ["hand"]);

        let obs = categorize_detections(&[det("hand", 0.9), det("person", 0.3)], &humans_map(), 15, 2).unwrap();
        assert_eq!(obs.num_objects(), 0);
        assert_eq!(obs.objects.shape(), &[0, 2]);
    }

    #[test]
    fn ties_keep_input_order() {
        let dets = vec![det("a", 0.5), det("b", 0.5), det("c", 0.5)];
        let obs = categorize_detections(&dets, &CategoryMap::default(), 2, 2).unwrap();
        assert_eq!(obs.object_labels, ["a", "b"]);
    }

    proptest! {
        #[test]
        fn kept_count_is_min_of_top_n_and_input(n in 0usize..30, top_n in 1usize..20, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels = ["hand", "cup", "person", "door"];
            let dets: Vec<Detection> = (0..n).map(|_| det(labels[rng.random_range(0..4)], rng.random_range(0.0..1.0))).collect();
            let obs = categorize_detections(&dets, &humans_map(), top_n, 2).unwrap();
            prop_assert_eq!(obs.num_humans() + obs.num_objects(), n.min(top_n));
        }

        #[test]
        fn laplacian_variance_is_non_negative_and_translation_invariant(
            vals in proptest::collection::vec(-3.0f64..3.0, 9), shift in 0usize..3
        ) {
            let mut a = Tensor::zeros(&[9, 9]);
            let mut b = Tensor::zeros(&[9, 9]);
            for r in 0..3 {
                for c in 0..3 {
                    a.data_mut()[(r + 2) * 9 + c + 2] = vals[r * 3 + c];
                    b.data_mut()[(r + 2 + shift) * 9 + c + 2 + shift] = vals[r * 3 + c];
                }
            }
            let va = variance_of_laplacian(&a).unwrap();
            let vb = variance_of_laplacian(&b).unwrap();
            prop_assert!(va >= 0.0);
            prop_assert!((va - vb).abs() < 1e-12 * (1.0 + va));
        }
    }

    #[test]
    fn embedding_matches_loop_and_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = ParamSet::new();
        let emb = NodeEmbedder::new(&mut params, 3, 2, 4, &mut rng);
        *params.get_mut(emb.activity.bias) = Tensor::uniform(&[1, 4], -1.0, 1.0, &mut rng);
        let x = Tensor::uniform(&[2, 3], -5.0, 5.0, &mut rng);
        let tape = Tape::new();
        let b = Binder::new(&tape, &params);
        let out = emb.embed(&b, &x, &Tensor::zeros(&[0, 2]), &Tensor::zeros(&[1, 2])).unwrap();
        let w = params.get(emb.activity.weight);
        let bias = params.get(emb.activity.bias);
        let a = out.activity.value();
        for r in 0..2 {
            for j in 0..4 {
                let mut acc = bias.get(0, j);
                for i in 0..3 {
                    acc += x.get(r, i) * w.get(i, j);
                }
                assert!((a.get(r, j) - acc.tanh()).abs() < 1e-14);
                assert!(a.get(r, j).abs() < 1.0);
            }
        }
        assert_eq!(out.humans.shape(), [0, 4]);
        // zero input, zero bias
        assert_eq!(out.objects.value().data(), &[0.0; 4]);
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.feat");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = ActivityFeatures::new("vid_7", Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng), 2.0, 7.5).unwrap();
        write_features(std::fs::File::create(&path).unwrap(), &f).unwrap();
        assert_eq!(read_features(&path).unwrap(), f);
    }

    #[test]
    fn detection_lines_report_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let good = KeyframeDetections {
            video_id: "v".into(),
            frame_index: 3,
            detections: vec![det("cup", 0.5)],
        };
        let mut buf = Vec::new();
        write_detections(&mut buf, std::slice::from_ref(&good)).unwrap();
        buf.extend_from_slice(b"{not json\n");
        std::fs::write(&path, &buf).unwrap();
        match read_detections(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        std::fs::write(&path, &buf[..buf.len() - 10]).unwrap();
        assert_eq!(read_detections(&path).unwrap(), vec![good]);
    }
}
