//! Depth metrics with median scaling and depth cap, and snippet ATE.

use serde::{Deserialize, Serialize};

use crate::camera::Pose;
use crate::error::{Error, Result};
use crate::raster::{DepthMap, Mask};

/// Smallest ground-truth depth that takes part in evaluation.
pub const GT_DEPTH_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthEvalResult {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_pixels: usize,
}

/// Median of a slice; the mean of the two central values for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Pixels with usable ground truth: inside `mask` (if any) and within `[floor, cap]`.
pub fn eval_mask(gt: &DepthMap, mask: Option<&Mask>, cap: f64) -> Mask {
    Mask::from_fn(gt.width(), gt.height(), |u, v| {
        let g = *gt.get(u, v);
        mask.is_none_or(|m| *m.get(u, v)) && g.is_finite() && g >= GT_DEPTH_FLOOR && g <= cap
    })
}

fn valid_pairs(pred: &DepthMap, gt: &DepthMap, mask: &Mask) -> Result<(Vec<f64>, Vec<f64>)> {
    pred.check_shape(gt, "ground truth depth")?;
    pred.check_shape(mask, "evaluation mask")?;
    let mut p = Vec::new();
    let mut g = Vec::new();
    for i in 0..gt.len() {
        if mask.data()[i] {
            p.push(pred.data()[i]);
            g.push(gt.data()[i]);
        }
    }
    if g.is_empty() {
        return Err(Error::Empty("no valid ground-truth pixels to evaluate".into()));
    }
    if let Some(bad) = p.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
        return Err(Error::Domain(format!("predicted depth {bad} must be positive and finite")));
    }
    Ok((p, g))
}

/// `median(gt) / median(pred)` over the pixels of `mask`.
pub fn median_scale(pred: &DepthMap, gt: &DepthMap, mask: &Mask) -> Result<f64> {
    let (p, g) = valid_pairs(pred, gt, mask)?;
    Ok(median(&g).unwrap() / median(&p).unwrap())
}

/// Metrics over pixels inside `mask` whose ground truth lies in `[floor, cap]`.
/// Predictions are used as given.
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, mask: Option<&Mask>, cap: f64) -> Result<DepthEvalResult> {
    let m = eval_mask(gt, mask, cap);
    let (p, g) = valid_pairs(pred, gt, &m)?;
    Ok(metrics_from_pairs(&p, &g))
}

fn metrics_from_pairs(pred: &[f64], gt: &[f64]) -> DepthEvalResult {
    let n = gt.len() as f64;
    let (mut abs_rel, mut sq_rel, mut sq, mut sq_log) = (0.0, 0.0, 0.0, 0.0);
    let mut within = [0usize; 3];
    for (&d, &g) in pred.iter().zip(gt) {
        let diff = d - g;
        abs_rel += diff.abs() / g;
        sq_rel += diff * diff / g;
        sq += diff * diff;
        let l = d.ln() - g.ln();
        sq_log += l * l;
        let ratio = (d / g).max(g / d);
        let mut thr = 1.0;
        for w in within.iter_mut() {
            thr *= 1.25;
            if ratio <= thr {
                *w += 1;
            }
        }
    }
    DepthEvalResult {
        abs_rel: abs_rel / n,
        sq_rel: sq_rel / n,
        rmse: (sq / n).sqrt(),
        rmse_log: (sq_log / n).sqrt(),
        delta1: within[0] as f64 / n,
        delta2: within[1] as f64 / n,
        delta3: within[2] as f64 / n,
        n_pixels: gt.len(),
    }
}

/// Evaluation with optional median scaling; returns the metrics and the scale applied.
pub fn evaluate_depth(
    pred: &DepthMap,
    gt: &DepthMap,
    mask: Option<&Mask>,
    cap: f64,
    median_scaling: bool,
) -> Result<(DepthEvalResult, f64)> {
    let m = eval_mask(gt, mask, cap);
    let (mut p, g) = valid_pairs(pred, gt, &m)?;
    let scale = if median_scaling {
        median(&g).unwrap() / median(&p).unwrap()
    } else {
        1.0
    };
    for d in &mut p {
        *d *= scale;
    }
    Ok((metrics_from_pairs(&p, &g), scale))
}

/// Re-expresses a trajectory relative to its first pose.
pub fn anchor(traj: &[Pose]) -> Vec<Pose> {
    match traj.first() {
        None => Vec::new(),
        Some(first) => {
            let inv = first.inverse();
            traj.iter().map(|p| inv.compose(p)).collect()
        }
    }
}

/// Absolute trajectory error of one snippet of camera-to-world poses.
///
/// Both trajectories are anchored at their first pose, predicted translations
/// are scaled by the least-squares factor, and the RMSE of the position error
/// is taken over the non-anchor frames.
pub fn ate_snippet(pred: &[Pose], gt: &[Pose]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "trajectory lengths differ: {} predicted vs {} ground truth",
            pred.len(),
            gt.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::Empty("a snippet needs at least two poses".into()));
    }
    let p = anchor(pred);
    let g = anchor(gt);
    let (mut num, mut den) = (0.0, 0.0);
    for (a, b) in p.iter().zip(&g).skip(1) {
        num += a.translation.dot(&b.translation);
        den += a.translation.norm_squared();
    }
    let s = if den > 0.0 { num / den } else { 0.0 };
    let sq: f64 = p
        .iter()
        .zip(&g)
        .skip(1)
        .map(|(a, b)| (a.translation * s - b.translation).norm_squared())
        .sum();
    Ok((sq / (p.len() - 1) as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AteSummary {
    pub mean: f64,
    pub std: f64,
    pub snippets: usize,
}

/// Mean and (population) standard deviation of [`ate_snippet`] over every
/// window of `snippet_len` consecutive poses.
pub fn ate_sequence(pred: &[Pose], gt: &[Pose], snippet_len: usize) -> Result<AteSummary> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "trajectory lengths differ: {} predicted vs {} ground truth",
            pred.len(),
            gt.len()
        )));
    }
    if snippet_len < 2 {
        return Err(Error::Config(format!("snippet length {snippet_len} must be at least 2")));
    }
    if pred.len() < snippet_len {
        return Err(Error::Empty(format!(
            "{} poses cannot form a snippet of length {snippet_len}",
            pred.len()
        )));
    }
    let errs = pred
        .windows(snippet_len)
        .zip(gt.windows(snippet_len))
        .map(|(p, g)| ate_snippet(p, g))
        .collect::<Result<Vec<_>>>()?;
    let n = errs.len() as f64;
    let mean = errs.iter().sum::<f64>() / n;
    let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    Ok(AteSummary {
        mean,
        std: var.sqrt(),
        snippets: errs.len(),
    })
}
