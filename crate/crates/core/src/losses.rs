//! Target distributions and the training objective.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};

/// Added inside every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Smoothing {
    Onehot,
    /// Discretised Gaussian with standard deviation `sigma` positions.
    Gaussian { sigma: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentTarget {
    pub start_index: usize,
    pub end_index: usize,
    pub start_dist: Vec<f64>,
    pub end_dist: Vec<f64>,
}

/// Feature position of a time: `floor(time / stride)` clamped to `[0, t-1]`.
pub fn time_to_index(time: f64, stride: f64, t: usize) -> usize {
    ((time / stride).floor().max(0.0) as usize).min(t - 1)
}

/// Map a ground-truth moment onto feature positions and build its start and
/// end target distributions.
///
/// The end time is exclusive on the feature grid: a moment ending exactly on
/// a window boundary does not claim the next window.
pub fn build_targets(start_s: f64, end_s: f64, stride: f64, t: usize, smoothing: Smoothing) -> Result<MomentTarget> {
    if !(start_s >= 0.0 && start_s <= end_s) {
        return Err(Error::Input(format!("invalid moment [{start_s}, {end_s}]")));
    }
    if t == 0 || !(stride > 0.0) {
        return Err(Error::Input(format!("invalid grid: t={t}, stride={stride}")));
    }
    let start_index = time_to_index(start_s, stride, t);
    let end_pos = (end_s / stride).ceil() - 1.0;
    let end_index = ((end_pos.max(0.0)) as usize).min(t - 1).max(start_index);
    Ok(MomentTarget {
        start_index,
        end_index,
        start_dist: target_distribution(start_index, t, smoothing),
        end_dist: target_distribution(end_index, t, smoothing),
    })
}

pub fn target_distribution(index: usize, t: usize, smoothing: Smoothing) -> Vec<f64> {
    match smoothing {
        Smoothing::Onehot => {
            let mut v = vec![0.0; t];
            v[index] = 1.0;
            v
        }
        Smoothing::Gaussian { sigma } => {
            let w: Vec<f64> = (0..t)
                .map(|i| {
                    let d = i as f64 - index as f64;
                    (-d * d / (2.0 * sigma * sigma)).exp()
                })
                .collect();
            let z: f64 = w.iter().sum();
            w.into_iter().map(|x| x / z).collect()
        }
    }
}

/// `KL(pred || target) = sum p (log(p + eps) - log(q + eps))`, with the
/// prediction as the first argument.
pub fn kl_divergence<'t>(pred: Var<'t>, target: &[f64]) -> Result<Var<'t>> {
    let shape = pred.shape();
    if shape.iter().product::<usize>() != target.len() {
        return Err(Error::Contract(format!(
            "distribution length mismatch: {:?} vs {}",
            shape,
            target.len()
        )));
    }
    let log_q = Tensor::new(shape, target.iter().map(|q| (q + LOG_FLOOR).ln()).collect())?;
    let log_q = pred.tape().constant(log_q);
    let log_p = pred.affine(1.0, LOG_FLOOR).log()?;
    Ok(pred.mul(log_p.sub(log_q)?)?.sum_all())
}

pub fn kl_loss<'t>(pred_start: Var<'t>, pred_end: Var<'t>, target: &MomentTarget) -> Result<Var<'t>> {
    kl_divergence(pred_start, &target.start_dist)?.add(kl_divergence(pred_end, &target.end_dist)?)
}

/// `-sum log(1 - y_i)` over positions strictly outside `[start, end]`.
pub fn spatial_loss<'t>(y: Var<'t>, start: usize, end: usize) -> Result<Var<'t>> {
    let shape = y.shape();
    let t: usize = shape.iter().product();
    if start > end || end >= t {
        return Err(Error::Contract(format!("span [{start}, {end}] outside {t} positions")));
    }
    let outside = Tensor::new(shape, (0..t).map(|i| if i < start || i > end { 1.0 } else { 0.0 }).collect())?;
    let log_rest = y.affine(-1.0, 1.0 + LOG_FLOOR).log()?;
    Ok(log_rest.mul_const(Rc::new(outside))?.sum_all().scale(-1.0))
}

pub fn total_loss<'t>(kl: Var<'t>, spatial: Var<'t>) -> Result<Var<'t>> {
    let total = kl.add(spatial)?;
    let v = total.value().item();
    if !v.is_finite() {
        return Err(Error::Training(format!("non-finite loss {v}")));
    }
    Ok(total)
}
