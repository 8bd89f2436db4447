//! The full localization model: query encoder, node embeddings, spatial
//! graph and temporal head, wired per graph variant.

use std::rc::Rc;
use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Binder, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::losses::{kl_loss, spatial_loss, total_loss, MomentTarget};
use crate::metrics::Interval;
use crate::spatial::{GraphState, GraphVariant, LanguageGraph, Layout, Linguistic, QueryMode};
use crate::temporal::{MomentPrediction, TemporalHead, TemporalOutput};
use crate::text::TextEncoder;
use crate::visual::{FrameObservations, NodeEmbedder, StackedObservations};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_w: usize,
    /// Per-direction hidden size of the query BiGRU; the query vectors are twice this.
    pub text_hidden: usize,
    pub d_v: usize,
    pub d_o: usize,
    pub latent: usize,
    /// Per-direction hidden size of the temporal BiGRU.
    pub hidden: usize,
    pub temporal_layers: usize,
    pub dropout: f64,
    pub variant: GraphVariant,
    pub iterations: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_w", self.d_w),
            ("text_hidden", self.text_hidden),
            ("d_v", self.d_v),
            ("d_o", self.d_o),
            ("latent", self.latent),
            ("hidden", self.hidden),
            ("temporal_layers", self.temporal_layers),
        ];
        if let Some((name, _)) = dims.iter().find(|d| d.1 == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
enum Frontend {
    Graph {
        text: TextEncoder,
        embedder: NodeEmbedder,
        graph: LanguageGraph,
    },
    /// Activity features concatenated with pooled detections, one affine map.
    Pooled { fuse: Linear },
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    frontend: Frontend,
    pub temporal: TemporalHead,
}

/// Video-level inputs laid out for one variant.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedVideo {
    /// `t x d_v`, or `t x (d_v + d_o)` for the pooled variant.
    pub activity: Tensor,
    pub observations: StackedObservations,
    pub stride_seconds: f64,
    pub duration_seconds: f64,
}

impl PreparedVideo {
    pub fn len(&self) -> usize {
        self.activity.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One query against one prepared video.
#[derive(Clone, Debug)]
pub struct SampleInput {
    pub token_ids: Vec<usize>,
    pub video: Arc<PreparedVideo>,
    pub target: MomentTarget,
    pub ground_truth: Interval,
}

#[derive(Clone, Copy, Debug)]
pub struct SampleLoss<'t> {
    pub total: Var<'t>,
    pub kl: f64,
    pub spatial: f64,
    pub output: TemporalOutput<'t>,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let c = &config;
        let frontend = match c.variant {
            GraphVariant::NoGraph => Frontend::Pooled {
                fuse: Linear::new(&mut params, "fuse", c.d_v + c.d_o, c.latent, rng),
            },
            v => {
                let text = TextEncoder::new(&mut params, c.vocab_size, c.d_w, c.text_hidden, rng);
                let embedder = NodeEmbedder::new(&mut params, c.d_v, c.d_o, c.latent, rng);
                let mode = if v == GraphVariant::SingleQuery { QueryMode::Single } else { QueryMode::Heads };
                let graph = LanguageGraph::new(&mut params, mode, text.query_dim(), c.latent, rng);
                Frontend::Graph { text, embedder, graph }
            }
        };
        let temporal = TemporalHead::new(&mut params, c.latent, c.hidden, c.temporal_layers, c.dropout, rng);
        Ok(Model {
            config,
            params,
            frontend,
            temporal,
        })
    }

    /// Route keyframe observations into node sets for this variant.
    pub fn prepare_video(&self, activity: &Tensor, frames: &[FrameObservations], stride_seconds: f64, duration_seconds: f64) -> Result<PreparedVideo> {
        prepare_video(self.config.variant, self.config.d_o, activity, frames, stride_seconds, duration_seconds)
    }

    /// Contextualized activity latents (`t x latent`).
    pub fn activity_latents<'t>(&self, b: &Binder<'t>, token_ids: &[usize], video: &PreparedVideo) -> Result<Var<'t>> {
        let tape = b.tape();
        match &self.frontend {
            Frontend::Pooled { fuse } => Ok(fuse.forward(b, tape.constant(video.activity.clone()))?.tanh()),
            Frontend::Graph { text, embedder, graph } => {
                let lang = match graph.mode {
                    QueryMode::Heads => {
                        let q = text.encode(b, token_ids)?;
                        Linguistic {
                            sv: q.sv,
                            sn: q.sn,
                            vn: q.vn,
                        }
                    }
                    QueryMode::Single => Linguistic::single(text.encode_pooled(b, token_ids)?),
                };
                let obs = &video.observations;
                let nodes = embedder.embed(b, &video.activity, &obs.humans, &obs.objects)?;
                let layout = Layout {
                    steps: video.len(),
                    human_step: Rc::new(obs.human_step.clone()),
                    object_step: Rc::new(obs.object_step.clone()),
                };
                let initial = GraphState::initial(nodes.activity, nodes.humans, nodes.objects);
                let state = graph.run(b, &lang, initial, &layout, self.config.iterations)?;
                Ok(state.activity)
            }
        }
    }

    pub fn forward<'t>(&self, b: &Binder<'t>, token_ids: &[usize], video: &PreparedVideo, dropout_rng: Option<&mut dyn RngCore>) -> Result<TemporalOutput<'t>> {
        let a = self.activity_latents(b, token_ids, video)?;
        self.temporal.forward(b, a, dropout_rng)
    }

    pub fn loss<'t>(&self, b: &Binder<'t>, sample: &SampleInput, dropout_rng: Option<&mut dyn RngCore>) -> Result<SampleLoss<'t>> {
        let output = self.forward(b, &sample.token_ids, &sample.video, dropout_rng)?;
        let kl = kl_loss(output.start, output.end, &sample.target)?;
        let spatial = spatial_loss(output.spatial, sample.target.start_index, sample.target.end_index)?;
        let (kl_value, spatial_value) = (kl.value().item(), spatial.value().item());
        Ok(SampleLoss {
            total: total_loss(kl, spatial)?,
            kl: kl_value,
            spatial: spatial_value,
            output,
        })
    }

    /// Evaluation-mode forward pass and decoding.
    pub fn predict(&self, token_ids: &[usize], video: &PreparedVideo) -> Result<MomentPrediction> {
        let tape = Tape::new();
        let b = Binder::new(&tape, &self.params);
        let out = self.forward(&b, token_ids, video, None)?;
        Ok(MomentPrediction::from_distributions(
            out.start.value().data().to_vec(),
            out.end.value().data().to_vec(),
            out.spatial.value().data().to_vec(),
            video.stride_seconds,
            video.duration_seconds,
        ))
    }
}

pub fn prepare_video(
    variant: GraphVariant,
    d_o: usize,
    activity: &Tensor,
    frames: &[FrameObservations],
    stride_seconds: f64,
    duration_seconds: f64,
) -> Result<PreparedVideo> {
    let (t, _) = activity.dims2()?;
    if frames.len() != t {
        return Err(Error::Input(format!("{} keyframes for {t} activity features", frames.len())));
    }
    let empty = Tensor::zeros(&[0, d_o]);
    let routed: Vec<FrameObservations> = frames
        .iter()
        .map(|f| {
            let mut f = f.clone();
            match variant {
                GraphVariant::NoNodeTypes => {
                    let mut rows: Vec<Vec<f64>> = (0..f.num_humans()).map(|r| f.humans.row_slice(r).to_vec()).collect();
                    rows.extend((0..f.num_objects()).map(|r| f.objects.row_slice(r).to_vec()));
                    f.objects = Tensor::from_rows(&rows, d_o)?;
                    f.humans = empty.clone();
                    let mut labels = std::mem::take(&mut f.human_labels);
                    labels.append(&mut f.object_labels);
                    f.object_labels = labels;
                }
                GraphVariant::NoHumanNode => {
                    f.humans = empty.clone();
                    f.human_labels.clear();
                }
                GraphVariant::NoObjectNode => {
                    f.objects = empty.clone();
                    f.object_labels.clear();
                }
                _ => {}
            }
            Ok(f)
        })
        .collect::<Result<_>>()?;

    if variant == GraphVariant::NoGraph {
        let pooled: Vec<Vec<f64>> = frames.iter().map(|f| mean_detection(f, d_o)).collect();
        let pooled = Tensor::from_rows(&pooled, d_o)?;
        let fused = Tape::new();
        let joined = fused.concat(&[fused.constant(activity.clone()), fused.constant(pooled)], Axis::Cols)?;
        return Ok(PreparedVideo {
            activity: (*joined.value()).clone(),
            observations: StackedObservations::from_frames(&vec![FrameObservations::empty(d_o); t], d_o)?,
            stride_seconds,
            duration_seconds,
        });
    }
    Ok(PreparedVideo {
        activity: activity.clone(),
        observations: StackedObservations::from_frames(&routed, d_o)?,
        stride_seconds,
        duration_seconds,
    })
}

/// Mean of every human and object feature at a keyframe; zeros when empty.
fn mean_detection(f: &FrameObservations, d_o: usize) -> Vec<f64> {
    let n = f.num_humans() + f.num_objects();
    let mut acc = vec![0.0; d_o];
    for x in f.humans.data().chunks(d_o).chain(f.objects.data().chunks(d_o)) {
        for (a, v) in acc.iter_mut().zip(x) {
            *a += v;
        }
    }
    if n > 0 {
        for a in &mut acc {
            *a /= n as f64;
        }
    }
    acc
}
