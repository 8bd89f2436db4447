//! Temporal contextualisation and start/end prediction.

use std::rc::Rc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Binder, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{BiGru, Linear};

#[derive(Clone, Debug)]
pub struct TemporalHead {
    pub gru: BiGru,
    pub start: Linear,
    pub end: Linear,
    /// Per-position score feeding the spatial loss.
    pub spatial_score: Linear,
    pub dropout: f64,
}

/// Distributions over feature positions, each a `1 x t` row.
#[derive(Clone, Copy, Debug)]
pub struct TemporalOutput<'t> {
    pub start: Var<'t>,
    pub end: Var<'t>,
    pub spatial: Var<'t>,
}

impl TemporalHead {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, latent: usize, hidden: usize, layers: usize, dropout: f64, rng: &mut R) -> Self {
        TemporalHead {
            gru: BiGru::new(params, "temporal.gru", latent, hidden, layers, rng),
            start: Linear::new(params, "temporal.start", 2 * hidden, 1, rng),
            end: Linear::new(params, "temporal.end", 2 * hidden, 1, rng),
            spatial_score: Linear::new(params, "temporal.spatial", latent, 1, rng),
            dropout,
        }
    }

    /// `dropout_rng` switches on training mode; `None` evaluates deterministically.
    pub fn forward<'t>(&self, b: &Binder<'t>, activity: Var<'t>, mut dropout_rng: Option<&mut dyn RngCore>) -> Result<TemporalOutput<'t>> {
        let t = activity.shape()[0];
        if t == 0 {
            return Err(Error::Input("temporal head needs at least one position".into()));
        }
        let p = self.dropout;
        let ctx = self.gru.forward(b, activity, |h| match dropout_rng.as_deref_mut() {
            Some(rng) if p > 0.0 => h.mul_const(Rc::new(dropout_mask(&h.shape(), p, rng))),
            _ => Ok(h),
        })?;
        let scores = |head: &Linear, x: Var<'t>| -> Result<Var<'t>> { head.forward(b, x)?.reshape(&[1, t])?.softmax(Axis::Cols) };
        Ok(TemporalOutput {
            start: scores(&self.start, ctx)?,
            end: scores(&self.end, ctx)?,
            spatial: scores(&self.spatial_score, activity)?,
        })
    }
}

/// Inverted dropout: kept entries are scaled by `1 / (1 - p)`.
pub fn dropout_mask(shape: &[usize], p: f64, rng: &mut dyn RngCore) -> Tensor {
    let keep = 1.0 / (1.0 - p);
    let n = shape.iter().product();
    let data = (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
    Tensor::new(shape.to_vec(), data).expect("mask shape")
}

/// Decoded moment together with the distributions it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentPrediction {
    pub start_dist: Vec<f64>,
    pub end_dist: Vec<f64>,
    pub spatial_scores: Vec<f64>,
    pub start_index: usize,
    pub end_index: usize,
    pub start_seconds: f64,
    pub end_seconds: f64,
}

impl MomentPrediction {
    pub fn from_distributions(start_dist: Vec<f64>, end_dist: Vec<f64>, spatial_scores: Vec<f64>, stride: f64, duration: f64) -> Self {
        let (start_index, end_index, start_seconds, end_seconds) = decode(&start_dist, &end_dist, stride, duration);
        MomentPrediction {
            start_dist,
            end_dist,
            spatial_scores,
            start_index,
            end_index,
            start_seconds,
            end_seconds,
        }
    }

    /// End predicted before start. Reported as-is.
    pub fn is_degenerate(&self) -> bool {
        self.end_seconds < self.start_seconds
    }
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Argmax positions and their times: a start index maps to the left edge of
/// its feature window and an end index to the right edge, clamped to the
/// video duration. No ordering between start and end is imposed.
pub fn decode(start_dist: &[f64], end_dist: &[f64], stride: f64, duration: f64) -> (usize, usize, f64, f64) {
    let s = argmax(start_dist);
    let e = argmax(end_dist);
    let start_seconds = (s as f64 * stride).min(duration);
    let end_seconds = ((e + 1) as f64 * stride).min(duration);
    (s, e, start_seconds, end_seconds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use proptest::prelude::*;
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn head(seed: u64) -> (ParamSet, TemporalHead) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let h = TemporalHead::new(&mut params, 3, 4, 2, 0.5, &mut rng);
        (params, h)
    }

    #[test]
    fn single_position_is_certain() {
        let (params, h) = head(0);
        let tape = Tape::new();
        let b = Binder::new(&tape, &params);
        let a = tape.constant(Tensor::row(vec![0.1, 0.2, 0.3]));
        let out = h.forward(&b, a, None).unwrap();
        assert_eq!(out.start.value().data(), &[1.0]);
        assert_eq!(out.end.value().data(), &[1.0]);
    }

    #[test]
    fn identical_rows_still_normalise() {
        let (params, h) = head(1);
        let tape = Tape::new();
        let b = Binder::new(&tape, &params);
        let a = tape.constant(Tensor::full(&[6, 3], 0.4));
        let out = h.forward(&b, a, None).unwrap();
        for d in [out.start, out.end, out.spatial] {
            assert!((d.value().sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let (params, h) = head(1);
        let tape = Tape::new();
        let b = Binder::new(&tape, &params);
        let a = tape.constant(Tensor::zeros(&[0, 3]));
        assert!(matches!(h.forward(&b, a, None), Err(Error::Input(_))));
    }

    #[test]
    fn evaluation_mode_is_deterministic_and_training_mode_is_not() {
        let (params, h) = head(2);
        let x = Tensor::uniform(&[7, 3], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let run = |rng: Option<&mut dyn RngCore>| {
            let tape = Tape::new();
            let b = Binder::new(&tape, &params);
            let out = h.forward(&b, tape.constant(x.clone()), rng).unwrap();
            out.start.value().data().to_vec()
        };
        assert_eq!(run(None), run(None));
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(run(Some(&mut r1)), run(Some(&mut r2)));
        let mut r3 = ChaCha8Rng::seed_from_u64(2);
        assert_ne!(run(None), run(Some(&mut r3)));
    }

    #[test]
    fn decode_examples() {
        let (s, _, ss, _) = decode(&[0.1, 0.7, 0.2], &[1.0, 0.0, 0.0], 2.0, 6.0);
        assert_eq!((s, ss), (1, 2.0));
        let u = [0.25; 4];
        assert_eq!(decode(&u, &u, 1.0, 4.0).0, 0);
        let (_, e, _, es) = decode(&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0], 2.0, 5.5);
        assert_eq!((e, es), (2, 5.5));
    }

    #[test]
    fn reversed_moment_is_flagged_not_fixed() {
        let p = MomentPrediction::from_distributions(vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0], vec![1.0 / 3.0; 3], 1.0, 3.0);
        assert!(p.is_degenerate());
        assert_eq!((p.start_seconds, p.end_seconds), (2.0, 1.0));
    }

    proptest! {
        #[test]
        fn argmax_survives_monotone_transforms(v in proptest::collection::vec(-5.0f64..5.0, 1..20)) {
            let soft = |x: &[f64]| {
                let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = x.iter().map(|y| (y - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|y| y / z).collect::<Vec<_>>()
            };
            let transformed: Vec<f64> = v.iter().map(|x| 3.0 * x.powi(3) + 0.5 * x - 1.0).collect();
            prop_assert_eq!(argmax(&soft(&v)), argmax(&soft(&transformed)));
        }
    }

    #[test]
    fn heads_are_permutation_covariant() {
        let (params, h) = head(3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ctx = Tensor::uniform(&[5, 8], -1.0, 1.0, &mut rng);
        let perm = [3usize, 0, 4, 1, 2];
        let score = |x: Tensor| {
            let tape = Tape::new();
            let b = Binder::new(&tape, &params);
            h.start.forward(&b, tape.constant(x)).unwrap().value().data().to_vec()
        };
        let base = score(ctx.clone());
        let rows: Vec<Vec<f64>> = perm.iter().map(|&p| ctx.row_slice(p).to_vec()).collect();
        let permuted = score(Tensor::from_rows(&rows, 8).unwrap());
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(permuted[i], base[p]);
        }
    }
}
