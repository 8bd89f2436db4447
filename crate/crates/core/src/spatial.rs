//! Language-conditioned message passing between the activity, human and
//! object nodes of each keyframe.
//!
//! The graph has three visual edges, each tied to one linguistic vector:
//!
//! | edge            | full graph | single query node |
//! |-----------------|------------|-------------------|
//! | human - object  | SN         | q                 |
//! | activity - object | VN       | q                 |
//! | human - activity  | SV       | q                 |
//!
//! For an edge with linguistic vector `l`, each endpoint observation `x` is
//! first paired with the query, `phi = W [l; x] + b`, and the message into one
//! endpoint is an affine map of `[phi_own ; phi_other]`, where `phi_other` is
//! summed when the other side is a set (humans or objects). Both directions
//! of an edge share the message map. Node latents are then refreshed as
//! `sigmoid(m(psi_1 * psi_2) * x0)` against their initial embeddings.
//!
//! All timesteps are processed at once: humans and objects from every
//! keyframe are stacked row-wise, and per-timestep sums are segment sums.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Axis, Binder, ParamSet, Var};
use crate::error::{Error, Result};
use crate::layers::Linear;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GraphVariant {
    Full,
    /// Activity features concatenated with mean-pooled detections, no message passing.
    NoGraph,
    /// Every detection is routed to the object node.
    NoNodeTypes,
    NoHumanNode,
    NoObjectNode,
    /// A single pooled query vector replaces the three linguistic nodes.
    SingleQuery,
}

impl GraphVariant {
    pub const ALL: [GraphVariant; 6] = [
        GraphVariant::Full,
        GraphVariant::NoGraph,
        GraphVariant::NoNodeTypes,
        GraphVariant::NoHumanNode,
        GraphVariant::NoObjectNode,
        GraphVariant::SingleQuery,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GraphVariant::Full => "full",
            GraphVariant::NoGraph => "no_graph",
            GraphVariant::NoNodeTypes => "no_node_types",
            GraphVariant::NoHumanNode => "no_human_node",
            GraphVariant::NoObjectNode => "no_object_node",
            GraphVariant::SingleQuery => "single_query",
        }
    }
}

impl fmt::Display for GraphVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GraphVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GraphVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown graph variant {s:?}")))
    }
}

impl serde::Serialize for GraphVariant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> serde::Deserialize<'de> for GraphVariant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// `W [l; x] + b` for a linguistic row `l` (`1 x dq`) and observations
/// `x` (`n x latent`).
///
/// The weight is applied in two blocks so the query half is computed once and
/// broadcast over the rows of `x`; the result is identical to concatenating.
#[derive(Clone, Copy, Debug)]
pub struct PairMap {
    pub map: Linear,
    pub query_dim: usize,
}

impl PairMap {
    fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, query_dim: usize, latent: usize, rng: &mut R) -> Self {
        PairMap {
            map: Linear::new(params, name, query_dim + latent, latent, rng),
            query_dim,
        }
    }

    pub fn forward<'t>(&self, b: &Binder<'t>, linguistic: Var<'t>, obs: Var<'t>) -> Result<Var<'t>> {
        let w = b.get(self.map.weight);
        let latent = self.map.in_dim - self.query_dim;
        let w_query = w.slice_rows(0, self.query_dim)?;
        let w_obs = w.slice_rows(self.query_dim, latent)?;
        let query_part = linguistic.matmul(w_query)?.add(b.get(self.map.bias))?;
        obs.matmul(w_obs)?.add(query_part)
    }
}

/// One visual edge of the graph.
#[derive(Clone, Copy, Debug)]
pub struct Edge {
    /// Pair map for the first endpoint (object, object, activity).
    pub phi_first: PairMap,
    /// Pair map for the second endpoint (human, activity, human).
    pub phi_second: PairMap,
    /// Shared message map, `2*latent -> latent`.
    pub message: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryMode {
    /// SV, SN, VN from the attention heads.
    Heads,
    /// The pooled query alone.
    Single,
}

/// Parameters of the message-passing graph.
#[derive(Clone, Debug)]
pub struct LanguageGraph {
    /// Human-object edge (SN).
    pub human_object: Edge,
    /// Activity-object edge (VN).
    pub activity_object: Edge,
    /// Human-activity edge (SV).
    pub human_activity: Edge,
    pub update_object: Linear,
    pub update_activity: Linear,
    pub update_human: Linear,
    pub mode: QueryMode,
    pub latent: usize,
}

/// Linguistic vectors feeding the three edges.
#[derive(Clone, Copy, Debug)]
pub struct Linguistic<'t> {
    pub sv: Var<'t>,
    pub sn: Var<'t>,
    pub vn: Var<'t>,
}

impl<'t> Linguistic<'t> {
    pub fn single(q: Var<'t>) -> Self {
        Linguistic { sv: q, sn: q, vn: q }
    }
}

/// Node latents at one iteration plus the initial embeddings.
#[derive(Clone, Copy, Debug)]
pub struct GraphState<'t> {
    pub iteration: usize,
    pub activity: Var<'t>,
    pub humans: Var<'t>,
    pub objects: Var<'t>,
    pub activity0: Var<'t>,
    pub humans0: Var<'t>,
    pub objects0: Var<'t>,
}

impl<'t> GraphState<'t> {
    pub fn initial(activity: Var<'t>, humans: Var<'t>, objects: Var<'t>) -> Self {
        GraphState {
            iteration: 0,
            activity,
            humans,
            objects,
            activity0: activity,
            humans0: humans,
            objects0: objects,
        }
    }
}

/// Which timestep each stacked human/object row belongs to.
#[derive(Clone, Debug)]
pub struct Layout {
    pub steps: usize,
    pub human_step: Rc<Vec<usize>>,
    pub object_step: Rc<Vec<usize>>,
}

/// Pair features for one iteration.
#[derive(Clone, Copy, Debug)]
pub struct Phis<'t> {
    /// SN paired with each object / human.
    pub sn_o: Var<'t>,
    pub sn_h: Var<'t>,
    /// VN paired with each object / the activity.
    pub vn_o: Var<'t>,
    pub vn_a: Var<'t>,
    /// SV paired with the activity / each human.
    pub sv_a: Var<'t>,
    pub sv_h: Var<'t>,
}

/// The six messages of one iteration, named `<sender>_to_<receiver>`.
#[derive(Clone, Copy, Debug)]
pub struct Messages<'t> {
    pub human_to_object: Var<'t>,
    pub activity_to_object: Var<'t>,
    pub human_to_activity: Var<'t>,
    pub object_to_activity: Var<'t>,
    pub object_to_human: Var<'t>,
    pub activity_to_human: Var<'t>,
}

impl LanguageGraph {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, mode: QueryMode, query_dim: usize, latent: usize, rng: &mut R) -> Self {
        let mut pair = |name: &str, rng: &mut R| PairMap::new(params, &format!("graph.phi_{name}"), query_dim, latent, rng);
        let (human_object, activity_object, human_activity) = match mode {
            QueryMode::Heads => {
                let (sno, snh) = (pair("sn_o", rng), pair("sn_h", rng));
                let (vno, vna) = (pair("vn_o", rng), pair("vn_a", rng));
                let (sva, svh) = (pair("sv_a", rng), pair("sv_h", rng));
                ((sno, snh), (vno, vna), (sva, svh))
            }
            QueryMode::Single => {
                let (qo, qa, qh) = (pair("q_o", rng), pair("q_a", rng), pair("q_h", rng));
                ((qo, qh), (qo, qa), (qa, qh))
            }
        };
        let (ho, ao, ha) = match mode {
            QueryMode::Heads => ("sn", "vn", "sv"),
            QueryMode::Single => ("q_ho", "q_ao", "q_ha"),
        };
        let mut edge = |(first, second): (PairMap, PairMap), tag: &str| Edge {
            phi_first: first,
            phi_second: second,
            message: Linear::new(params, &format!("graph.msg_{tag}"), 2 * latent, latent, rng),
        };
        let human_object = edge(human_object, ho);
        let activity_object = edge(activity_object, ao);
        let human_activity = edge(human_activity, ha);
        LanguageGraph {
            human_object,
            activity_object,
            human_activity,
            update_object: Linear::new(params, "graph.update_o", latent, latent, rng),
            update_activity: Linear::new(params, "graph.update_a", latent, latent, rng),
            update_human: Linear::new(params, "graph.update_h", latent, latent, rng),
            mode,
            latent,
        }
    }

    pub fn phis<'t>(&self, b: &Binder<'t>, lang: &Linguistic<'t>, state: &GraphState<'t>) -> Result<Phis<'t>> {
        Ok(Phis {
            sn_o: self.human_object.phi_first.forward(b, lang.sn, state.objects)?,
            sn_h: self.human_object.phi_second.forward(b, lang.sn, state.humans)?,
            vn_o: self.activity_object.phi_first.forward(b, lang.vn, state.objects)?,
            vn_a: self.activity_object.phi_second.forward(b, lang.vn, state.activity)?,
            sv_a: self.human_activity.phi_first.forward(b, lang.sv, state.activity)?,
            sv_h: self.human_activity.phi_second.forward(b, lang.sv, state.humans)?,
        })
    }

    pub fn messages<'t>(&self, b: &Binder<'t>, phis: &Phis<'t>, layout: &Layout) -> Result<Messages<'t>> {
        let tape = b.tape();
        let t = layout.steps;
        let hs = &layout.human_step;
        let os = &layout.object_step;
        let msg = |edge: &Edge, own: Var<'t>, other: Var<'t>| -> Result<Var<'t>> {
            edge.message.forward(b, tape.concat(&[own, other], Axis::Cols)?)
        };

        let sum_sn_h = phis.sn_h.segment_sum(hs.clone(), t)?;
        let sum_sn_o = phis.sn_o.segment_sum(os.clone(), t)?;
        let sum_vn_o = phis.vn_o.segment_sum(os.clone(), t)?;
        let sum_sv_h = phis.sv_h.segment_sum(hs.clone(), t)?;

        Ok(Messages {
            human_to_object: msg(&self.human_object, phis.sn_o, sum_sn_h.gather_rows(os.clone())?)?,
            activity_to_object: msg(&self.activity_object, phis.vn_o, phis.vn_a.gather_rows(os.clone())?)?,
            human_to_activity: msg(&self.human_activity, phis.sv_a, sum_sv_h)?,
            object_to_activity: msg(&self.activity_object, phis.vn_a, sum_vn_o)?,
            object_to_human: msg(&self.human_object, phis.sn_h, sum_sn_o.gather_rows(hs.clone())?)?,
            activity_to_human: msg(&self.human_activity, phis.sv_h, phis.sv_a.gather_rows(hs.clone())?)?,
        })
    }

    pub fn update<'t>(&self, b: &Binder<'t>, state: &GraphState<'t>, m: &Messages<'t>) -> Result<GraphState<'t>> {
        let refresh = |map: &Linear, x: Var<'t>, y: Var<'t>, init: Var<'t>| -> Result<Var<'t>> {
            Ok(map.forward(b, x.mul(y)?)?.mul(init)?.sigmoid())
        };
        Ok(GraphState {
            iteration: state.iteration + 1,
            objects: refresh(&self.update_object, m.human_to_object, m.activity_to_object, state.objects0)?,
            activity: refresh(&self.update_activity, m.human_to_activity, m.object_to_activity, state.activity0)?,
            humans: refresh(&self.update_human, m.object_to_human, m.activity_to_human, state.humans0)?,
            ..*state
        })
    }

    /// `iterations` rounds of pair features, messages and updates. Zero
    /// iterations return `initial` untouched.
    pub fn run<'t>(
        &self,
        b: &Binder<'t>,
        lang: &Linguistic<'t>,
        initial: GraphState<'t>,
        layout: &Layout,
        iterations: usize,
    ) -> Result<GraphState<'t>> {
        let mut state = initial;
        for _ in 0..iterations {
            let phis = self.phis(b, lang, &state)?;
            let msgs = self.messages(b, &phis, layout)?;
            state = self.update(b, &state, &msgs)?;
        }
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn variant_names_round_trip() {
        for v in GraphVariant::ALL {
            assert_eq!(v.name().parse::<GraphVariant>().unwrap(), v);
        }
        assert!(matches!("bogus".parse::<GraphVariant>(), Err(Error::Config(_))));
    }

    #[test]
    fn pair_map_zero_weights_give_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamSet::new();
        let pm = PairMap::new(&mut params, "p", 2, 3, &mut rng);
        *params.get_mut(pm.map.weight) = Tensor::zeros(&[5, 3]);
        *params.get_mut(pm.map.bias) = Tensor::row(vec![0.5, -1.0, 2.0]);
        let tape = Tape::new();
        let b = Binder::new(&tape, &params);
        let l = tape.constant(Tensor::row(vec![3.0, 4.0]));
        let x = tape.constant(Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng));
        let out = pm.forward(&b, l, x).unwrap().value();
        assert_eq!(out.data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn pair_map_selector_returns_observation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamSet::new();
        let pm = PairMap::new(&mut params, "p", 2, 3, &mut rng);
        let mut w = Tensor::zeros(&[5, 3]);
        for i in 0..3 {
            w.data_mut()[(2 + i) * 3 + i] = 1.0;
        }
        *params.get_mut(pm.map.weight) = w;
        let tape = Tape::new();
        let b = Binder::new(&tape, &params);
        let l = tape.constant(Tensor::row(vec![3.0, 4.0]));
        let xv = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng);
        let out = pm.forward(&b, l, tape.constant(xv.clone())).unwrap().value();
        assert_eq!(*out, xv);
    }

    #[test]
    fn pair_map_matches_concatenation_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = ParamSet::new();
        let pm = PairMap::new(&mut params, "p", 3, 2, &mut rng);
        *params.get_mut(pm.map.bias) = Tensor::uniform(&[1, 2], -1.0, 1.0, &mut rng);
        let lv = Tensor::uniform(&[1, 3], -1.0, 1.0, &mut rng);
        let xv = Tensor::uniform(&[4, 2], -1.0, 1.0, &mut rng);
        let tape = Tape::new();
        let b = Binder::new(&tape, &params);
        let out = pm.forward(&b, tape.constant(lv.clone()), tape.constant(xv.clone())).unwrap().value();
        let w = params.get(pm.map.weight);
        let bias = params.get(pm.map.bias);
        for r in 0..4 {
            let cat: Vec<f64> = lv.data().iter().chain(xv.row_slice(r)).copied().collect();
            for j in 0..2 {
                let mut acc = bias.get(0, j);
                for (i, c) in cat.iter().enumerate() {
                    acc += c * w.get(i, j);
                }
                assert!((out.get(r, j) - acc).abs() < 1e-14);
            }
        }
    }

    fn tiny(mode: QueryMode, k_rows: usize, j_rows: usize) -> (ParamSet, LanguageGraph, Vec<Tensor>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = ParamSet::new();
        let g = LanguageGraph::new(&mut params, mode, 4, 3, &mut rng);
        let data = vec![
            Tensor::uniform(&[2, 3], -0.9, 0.9, &mut rng),
            Tensor::uniform(&[k_rows, 3], -0.9, 0.9, &mut rng),
            Tensor::uniform(&[j_rows, 3], -0.9, 0.9, &mut rng),
            Tensor::uniform(&[1, 4], -1.0, 1.0, &mut rng),
        ];
        (params, g, data)
    }

    #[test]
    fn zero_iterations_leave_state_untouched() {
        let (params, g, d) = tiny(QueryMode::Heads, 1, 2);
        let tape = Tape::new();
        let b = Binder::new(&tape, &params);
        let s0 = GraphState::initial(tape.constant(d[0].clone()), tape.constant(d[1].clone()), tape.constant(d[2].clone()));
        let q = tape.constant(d[3].clone());
        let layout = Layout {
            steps: 2,
            human_step: Rc::new(vec![1]),
            object_step: Rc::new(vec![0, 1]),
        };
        let out = g.run(&b, &Linguistic::single(q), s0, &layout, 0).unwrap();
        assert_eq!(out.activity.id(), s0.activity.id());
        assert_eq!(*out.activity.value(), d[0]);
    }

    #[test]
    fn updates_are_in_unit_interval_and_empty_sets_are_legal() {
        let (params, g, d) = tiny(QueryMode::Heads, 0, 0);
        let tape = Tape::new();
        let b = Binder::new(&tape, &params);
        let s0 = GraphState::initial(tape.constant(d[0].clone()), tape.constant(d[1].clone()), tape.constant(d[2].clone()));
        let q = tape.constant(d[3].clone());
        let layout = Layout {
            steps: 2,
            human_step: Rc::new(vec![]),
            object_step: Rc::new(vec![]),
        };
        let out = g.run(&b, &Linguistic::single(q), s0, &layout, 3).unwrap();
        assert_eq!(out.iteration, 3);
        assert_eq!(out.humans.shape(), [0, 3]);
        for &x in out.activity.value().data() {
            assert!(x > 0.0 && x < 1.0);
        }
    }

    #[test]
    fn zero_messages_give_half() {
        let (mut params, g, d) = tiny(QueryMode::Heads, 1, 1);
        for u in [g.update_activity, g.update_human, g.update_object] {
            *params.get_mut(u.bias) = Tensor::zeros(&[1, 3]);
        }
        let tape = Tape::new();
        let b = Binder::new(&tape, &params);
        let s0 = GraphState::initial(tape.constant(d[0].clone()), tape.constant(d[1].clone()), tape.constant(d[2].clone()));
        let zero_a = tape.constant(Tensor::zeros(&[2, 3]));
        let zero_1 = tape.constant(Tensor::zeros(&[1, 3]));
        let m = Messages {
            human_to_object: zero_1,
            activity_to_object: zero_1,
            human_to_activity: zero_a,
            object_to_activity: zero_a,
            object_to_human: zero_1,
            activity_to_human: zero_1,
        };
        let s1 = g.update(&b, &s0, &m).unwrap();
        assert!(s1.activity.value().data().iter().all(|&x| x == 0.5));
        assert!(s1.humans.value().data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn message_maps_are_shared_between_directions() {
        let (params, g, _) = tiny(QueryMode::Heads, 1, 1);
        assert_eq!(params.len(), 6 * 2 + 3 * 2 + 3 * 2);
        let (params_q, gq, _) = tiny(QueryMode::Single, 1, 1);
        assert_eq!(params_q.len(), 3 * 2 + 3 * 2 + 3 * 2);
        assert_eq!(gq.human_object.phi_first.map.weight, gq.activity_object.phi_first.map.weight);
        assert_eq!(params.name(g.human_activity.message.weight), "graph.msg_sv.weight");
    }
}
