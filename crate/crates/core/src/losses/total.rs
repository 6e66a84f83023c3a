//! The weighted total loss over one snippet, its frozen discrete state, and the
//! analytic gradient of the continuous objective.
//!
//! Evaluation happens in two stages. [`Selection::compute`] fixes every
//! discrete quantity (warp validity, semantic masks, automask, per-pixel source
//! choices and the semantic loss value). [`evaluate`] and [`objective_gradient`]
//! then treat that selection as constant, which makes the objective a
//! continuous, almost-everywhere differentiable function of depth and pose.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::photometric::{identity_error_floor, mean_over_choice, recon_error, select_min_below};
use super::point3d::{penalize, point_error_map};
use super::prior::{road_hinge_backward, road_ordering_loss, smoothness_backward, smoothness_loss};
use super::semantic::{semantic_loss, semantic_mask};
use super::ssim::ssim_backward_b;
use crate::camera::{Intrinsics, Pixel, Pose};
use crate::error::{Error, Result};
use crate::raster::{DepthMap, Image, LabelMap, Mask, Raster};
use crate::warp::{bilinear_sample, bilinear_with_grad, nearest_sample, validity, warp_coordinates};

/// Term weights and penalty constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// λ1, semantically masked image reconstruction.
    pub image: f64,
    /// λ2, semantic reconstruction.
    pub semantic: f64,
    /// λ3, 3D point consistency.
    pub point: f64,
    /// λ4, road depth ordering.
    pub road: f64,
    /// λ5, edge-aware smoothness.
    pub smooth: f64,
    /// SSIM / L1 mix.
    pub alpha: f64,
    /// `b`, added to `re` where the semantic mask is set.
    pub image_penalty: f64,
    /// `h`, added to `pe` where the semantic mask is set; also the keep threshold.
    pub point_penalty: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            image: 1.0,
            semantic: 0.1,
            point: 0.1,
            road: 0.1,
            smooth: 0.001,
            alpha: 0.85,
            image_penalty: 10.0,
            point_penalty: 4.0 * crate::DEFAULT_DEPTH_CAP,
        }
    }
}

impl LossWeights {
    pub fn only(image: f64, semantic: f64, point: f64, road: f64, smooth: f64) -> Self {
        Self {
            image,
            semantic,
            point,
            road,
            smooth,
            ..Self::default()
        }
    }

    /// Checks ranges; `depth_cap` bounds the attainable 3D error.
    pub fn validate(&self, depth_cap: f64) -> Result<()> {
        let lambdas = [self.image, self.semantic, self.point, self.road, self.smooth];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be nonnegative, got {lambdas:?}")));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        // re ≤ α/2·2 + (1−α)·1 = 1 for intensities in [0, 1]
        if !(self.image_penalty > 1.0) {
            return Err(Error::Config(format!(
                "image penalty b = {} must exceed the maximum reconstruction error 1",
                self.image_penalty
            )));
        }
        if !(self.point_penalty >= 4.0 * depth_cap) {
            return Err(Error::Config(format!(
                "point penalty h = {} must be at least 4 × depth cap = {}",
                self.point_penalty,
                4.0 * depth_cap
            )));
        }
        Ok(())
    }
}

/// Weights plus the switches that change which discrete machinery is active.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Use the semantic inconsistency mask in the image and 3D losses.
    pub semantic_masking: bool,
    /// Class ids treated as road surface by the ordering prior.
    pub ground_classes: Vec<u8>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            semantic_masking: true,
            ground_classes: vec![0, 1],
        }
    }
}

/// Borrowed image, segmentation and depth of one frame.
#[derive(Clone, Copy)]
pub struct FrameView<'a> {
    pub image: &'a Image,
    pub labels: &'a LabelMap,
    pub depth: &'a DepthMap,
}

#[derive(Clone, Copy)]
pub struct SourceInput<'a> {
    pub frame: FrameView<'a>,
    pub target_to_source: Pose,
}

/// One target frame and the source frames it is reconstructed from.
#[derive(Clone)]
pub struct SnippetInputs<'a> {
    pub intrinsics: Intrinsics,
    pub target: FrameView<'a>,
    pub sources: Vec<SourceInput<'a>>,
}

impl SnippetInputs<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::Config("a snippet needs at least one source frame".into()));
        }
        if self.sources.len() > u8::MAX as usize {
            return Err(Error::Config("too many source frames".into()));
        }
        let t = &self.target;
        t.image.check_shape(t.labels, "target labels")?;
        t.image.check_shape(t.depth, "target depth")?;
        for (i, s) in self.sources.iter().enumerate() {
            let what = format!("source {i}");
            t.image.check_shape(s.frame.image, &what)?;
            t.image.check_shape(s.frame.labels, &what)?;
            t.image.check_shape(s.frame.depth, &what)?;
        }
        Ok(())
    }
}

/// Continuous per-source quantities at the current depth and pose.
pub(crate) struct SourceForward {
    pub valid: Mask,
    pub synthesized: Image,
    pub warped_labels: LabelMap,
    /// `pe` wherever a coordinate exists (zero-padded depth sampling).
    pub pe: Raster<f64>,
}

pub(crate) fn forward_source(k: &Intrinsics, target_depth: &DepthMap, src: &SourceInput<'_>) -> SourceForward {
    let coords = warp_coordinates(k, &src.target_to_source, target_depth);
    let (synthesized, valid) = bilinear_sample(src.frame.image, &coords);
    let (warped_labels, _) = nearest_sample(src.frame.labels, &coords);
    let has_coord = coords.map(|c| c.is_some());
    let pe = point_error_map(k, target_depth, src.frame.depth, &src.target_to_source, &coords, &has_coord);
    SourceForward {
        valid,
        synthesized,
        warped_labels,
        pe,
    }
}

/// Every discrete quantity of the loss, held fixed during differentiation.
#[derive(Clone, Debug)]
pub struct Selection {
    /// Warp validity per source.
    pub valid: Vec<Mask>,
    /// Semantic inconsistency mask `M` per source (all clear when masking is off).
    pub semantic: Vec<Mask>,
    /// Warped segmentation `Ŝ` per source.
    pub warped_labels: Vec<LabelMap>,
    /// Plain automask `μ` (no semantic penalty).
    pub automask: Mask,
    /// Per-pixel `min re(I_t, I_t')` over unwarped sources.
    pub identity_floor: Raster<f64>,
    /// Source selected for the image loss, `None` where the pixel is dropped.
    pub image_choice: Raster<Option<u8>>,
    /// Source selected for the 3D point loss.
    pub point_choice: Raster<Option<u8>>,
    pub semantic_value: f64,
}

impl Selection {
    pub fn compute(inputs: &SnippetInputs<'_>, config: &LossConfig) -> Selection {
        let forwards: Vec<_> = inputs
            .sources
            .iter()
            .map(|s| forward_source(&inputs.intrinsics, inputs.target.depth, s))
            .collect();
        Self::from_forwards(inputs, config, &forwards)
    }

    fn from_forwards(inputs: &SnippetInputs<'_>, config: &LossConfig, forwards: &[SourceForward]) -> Selection {
        let w = &config.weights;
        let target = &inputs.target;
        let source_images: Vec<&Image> = inputs.sources.iter().map(|s| s.frame.image).collect();
        let identity_floor = identity_error_floor(target.image, &source_images, w.alpha);
        let re: Vec<_> = forwards
            .iter()
            .map(|f| recon_error(target.image, &f.synthesized, w.alpha))
            .collect();
        let valid: Vec<Mask> = forwards.iter().map(|f| f.valid.clone()).collect();
        let valid_refs: Vec<&Mask> = valid.iter().collect();
        let semantic: Vec<Mask> = forwards
            .iter()
            .map(|f| {
                if config.semantic_masking {
                    semantic_mask(target.labels, &f.warped_labels, &f.valid)
                } else {
                    Mask::filled(f.valid.width(), f.valid.height(), false)
                }
            })
            .collect();

        let automask = select_min_below(&re, &valid_refs, |u, v| *identity_floor.get(u, v)).map(|c| c.is_some());
        let mre = penalize(&re, Some(&semantic), w.image_penalty);
        let image_choice = select_min_below(&mre, &valid_refs, |u, v| *identity_floor.get(u, v));
        let mpe = penalize(
            &forwards.iter().map(|f| f.pe.clone()).collect::<Vec<_>>(),
            Some(&semantic),
            w.point_penalty,
        );
        let point_choice = select_min_below(&mpe, &valid_refs, |_, _| w.point_penalty);
        let warped: Vec<(&LabelMap, &Mask)> = forwards.iter().map(|f| (&f.warped_labels, &f.valid)).collect();
        let semantic_value = semantic_loss(target.labels, &warped);

        Selection {
            valid,
            semantic,
            warped_labels: forwards.iter().map(|f| f.warped_labels.clone()).collect(),
            automask,
            identity_floor,
            image_choice,
            point_choice,
            semantic_value,
        }
    }

    pub fn image_kept(&self) -> usize {
        self.image_choice.data().iter().filter(|c| c.is_some()).count()
    }

    pub fn point_kept(&self) -> usize {
        self.point_choice.data().iter().filter(|c| c.is_some()).count()
    }
}

/// Scalar value of each loss term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub image: f64,
    pub semantic: f64,
    pub point: f64,
    /// Normalized count of road ordering violations.
    pub road: f64,
    /// Hinge surrogate of the road term (drives gradients).
    pub road_hinge: f64,
    pub smooth: f64,
}

impl LossTerms {
    /// `λ1 L_img + λ2 L_ss + λ3 L_3D + λ4 L_road + λ5 L_smooth`.
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.image * self.image + w.semantic * self.semantic + w.point * self.point + w.road * self.road + w.smooth * self.smooth
    }

    /// Same weighting with the road count replaced by its hinge surrogate.
    pub fn objective(&self, w: &LossWeights) -> f64 {
        w.image * self.image
            + w.semantic * self.semantic
            + w.point * self.point
            + w.road * self.road_hinge
            + w.smooth * self.smooth
    }
}

/// Loss values, per-pixel maps and the discrete state of one evaluation.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub terms: LossTerms,
    pub total: f64,
    pub objective: f64,
    pub road_violations: usize,
    pub re: Vec<Raster<f64>>,
    pub mre: Vec<Raster<f64>>,
    pub pe: Vec<Raster<f64>>,
    pub mpe: Vec<Raster<f64>>,
    pub selection: Selection,
}

struct Evaluated {
    terms: LossTerms,
    road_violations: usize,
    re: Vec<Raster<f64>>,
    mre: Vec<Raster<f64>>,
    pe: Vec<Raster<f64>>,
    mpe: Vec<Raster<f64>>,
}

fn evaluate_forwards(
    inputs: &SnippetInputs<'_>,
    config: &LossConfig,
    selection: &Selection,
    forwards: &[SourceForward],
) -> Evaluated {
    let w = &config.weights;
    let target = &inputs.target;
    let re: Vec<_> = forwards
        .iter()
        .map(|f| recon_error(target.image, &f.synthesized, w.alpha))
        .collect();
    let mre = penalize(&re, Some(&selection.semantic), w.image_penalty);
    let pe: Vec<_> = forwards.iter().map(|f| f.pe.clone()).collect();
    let mpe = penalize(&pe, Some(&selection.semantic), w.point_penalty);
    let road = road_ordering_loss(target.depth, target.labels, &config.ground_classes);
    let valid: Vec<&Mask> = forwards.iter().map(|f| &f.valid).collect();
    let terms = LossTerms {
        image: mean_over_choice(&mre, &restrict_choice(&selection.image_choice, &valid)),
        semantic: selection.semantic_value,
        point: mean_over_choice(&mpe, &restrict_choice(&selection.point_choice, &valid)),
        road: road.value,
        road_hinge: road.hinge,
        smooth: smoothness_loss(target.depth, target.image),
    };
    Evaluated {
        terms,
        road_violations: road.violations,
        re,
        mre,
        pe,
        mpe,
    }
}

/// Drops chosen pixels whose warp into the chosen source is no longer valid.
fn restrict_choice(choice: &Raster<Option<u8>>, valid: &[&Mask]) -> Raster<Option<u8>> {
    let mut out = choice.clone();
    for (i, c) in out.data_mut().iter_mut().enumerate() {
        if let Some(s) = *c {
            if !valid[s as usize].data()[i] {
                *c = None;
            }
        }
    }
    out
}

/// Loss terms at the current geometry with `selection` held fixed, except
/// that pixels whose warp has left the source image no longer count.
pub fn evaluate(inputs: &SnippetInputs<'_>, config: &LossConfig, selection: &Selection) -> LossTerms {
    let forwards: Vec<_> = inputs
        .sources
        .iter()
        .map(|s| forward_source(&inputs.intrinsics, inputs.target.depth, s))
        .collect();
    evaluate_forwards(inputs, config, selection, &forwards).terms
}

/// Full evaluation: fresh selection, every term, every map.
pub fn total_loss(inputs: &SnippetInputs<'_>, config: &LossConfig) -> LossReport {
    let forwards: Vec<_> = inputs
        .sources
        .iter()
        .map(|s| forward_source(&inputs.intrinsics, inputs.target.depth, s))
        .collect();
    let selection = Selection::from_forwards(inputs, config, &forwards);
    let ev = evaluate_forwards(inputs, config, &selection, &forwards);
    LossReport {
        total: ev.terms.total(&config.weights),
        objective: ev.terms.objective(&config.weights),
        terms: ev.terms,
        road_violations: ev.road_violations,
        re: ev.re,
        mre: ev.mre,
        pe: ev.pe,
        mpe: ev.mpe,
        selection,
    }
}

/// Gradient of the objective w.r.t. every depth value and each source pose.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub target_depth: DepthMap,
    pub source_depths: Vec<DepthMap>,
    /// `∂L/∂R` of each target→source rotation (entrywise).
    pub rotation: Vec<Matrix3<f64>>,
    pub translation: Vec<Vector3<f64>>,
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Analytic gradient of [`LossTerms::objective`] with `selection` frozen.
pub fn objective_gradient(inputs: &SnippetInputs<'_>, config: &LossConfig, selection: &Selection) -> Gradients {
    let w = &config.weights;
    let k = &inputs.intrinsics;
    let target = &inputs.target;
    let (width, height) = target.depth.dims();

    let mut g_target = DepthMap::filled(width, height, 0.0);
    let mut g_sources = Vec::with_capacity(inputs.sources.len());
    let mut g_rot = Vec::with_capacity(inputs.sources.len());
    let mut g_trans = Vec::with_capacity(inputs.sources.len());

    let valid = source_validity(inputs);
    let valid_refs: Vec<&Mask> = valid.iter().collect();
    let image_choice = restrict_choice(&selection.image_choice, &valid_refs);
    let point_choice = restrict_choice(&selection.point_choice, &valid_refs);
    let n_img = image_choice.data().iter().filter(|c| c.is_some()).count();
    let n_pt = point_choice.data().iter().filter(|c| c.is_some()).count();

    for (s, src) in inputs.sources.iter().enumerate() {
        let s_id = s as u8;
        let pose = &src.target_to_source;
        let back = pose.inverse();
        let coords = warp_coordinates(k, pose, target.depth);
        let (synth, _) = bilinear_sample(src.frame.image, &coords);

        // ∂L/∂Î per pixel and channel
        let mut g_img = Raster::filled(width, height, [0.0; 3]);
        if w.image > 0.0 && n_img > 0 {
            let n = n_img as f64;
            let upstream = image_choice
                .map(|c| if *c == Some(s_id) { -w.image * w.alpha / (6.0 * n) } else { 0.0 });
            g_img = ssim_backward_b(target.image, &synth, &upstream);
            let l1 = w.image * (1.0 - w.alpha) / (3.0 * n);
            for (i, c) in image_choice.data().iter().enumerate() {
                if *c == Some(s_id) {
                    let (a, b) = (target.image.data()[i], synth.data()[i]);
                    let g = &mut g_img.data_mut()[i];
                    for ch in 0..3 {
                        g[ch] += l1 * sign(b[ch] - a[ch]);
                    }
                }
            }
        }

        let mut g_src_depth = DepthMap::filled(width, height, 0.0);
        let mut g_r = Matrix3::zeros();
        let mut g_t = Vector3::zeros();
        let point_scale = if w.point > 0.0 && n_pt > 0 { w.point / n_pt as f64 } else { 0.0 };

        for v in 0..height {
            for u in 0..width {
                let Some(q) = *coords.get(u, v) else { continue };
                let ray = k.ray(Pixel::new(u as f64, v as f64));
                let x = ray * *target.depth.get(u, v);
                let y = pose.transform(&x);

                let mut g_q = [0.0, 0.0];
                let gi = g_img.get(u, v);
                if gi.iter().any(|g| *g != 0.0) {
                    let (_, du, dv) = bilinear_with_grad(src.frame.image, q);
                    for ch in 0..3 {
                        g_q[0] += gi[ch] * du[ch];
                        g_q[1] += gi[ch] * dv[ch];
                    }
                }

                let mut g_x = Vector3::zeros();
                if point_scale > 0.0 && *point_choice.get(u, v) == Some(s_id) {
                    let (d_s, dd_u, dd_v) = bilinear_with_grad(src.frame.depth, q);
                    let r_q = k.ray(q);
                    let p_s = r_q * d_s;
                    let p_hat = back.transform(&p_s);
                    let e = x - p_hat;
                    let sgn = Vector3::new(sign(e.x), sign(e.y), sign(e.z)) * point_scale;
                    g_x += sgn;
                    let g_phat = -sgn;
                    // p̂ = Rᵀ (p_s − t)
                    let g_ps = pose.rotation * g_phat;
                    g_t -= g_ps;
                    g_r += (p_s - pose.translation) * g_phat.transpose();
                    // p_s = d_s · K⁻¹ q
                    let g_ds = g_ps.dot(&r_q);
                    g_q[0] += g_ps.x * d_s / k.fx + g_ds * dd_u;
                    g_q[1] += g_ps.y * d_s / k.fy + g_ds * dd_v;
                    scatter_bilinear(&mut g_src_depth, q, g_ds);
                }

                if g_q[0] != 0.0 || g_q[1] != 0.0 {
                    let iz = 1.0 / y.z;
                    let g_y = Vector3::new(
                        g_q[0] * k.fx * iz,
                        g_q[1] * k.fy * iz,
                        -(g_q[0] * k.fx * y.x + g_q[1] * k.fy * y.y) * iz * iz,
                    );
                    g_r += g_y * x.transpose();
                    g_t += g_y;
                    g_x += pose.rotation.transpose() * g_y;
                }
                if g_x != Vector3::zeros() {
                    *g_target.get_mut(u, v) += ray.dot(&g_x);
                }
            }
        }
        g_sources.push(g_src_depth);
        g_rot.push(g_r);
        g_trans.push(g_t);
    }

    if w.smooth > 0.0 {
        smoothness_backward(target.depth, target.image, w.smooth, &mut g_target);
    }
    if w.road > 0.0 {
        road_hinge_backward(target.depth, target.labels, &config.ground_classes, w.road, &mut g_target);
    }

    Gradients {
        target_depth: g_target,
        source_depths: g_sources,
        rotation: g_rot,
        translation: g_trans,
    }
}

/// Adjoint of bilinear sampling: spreads `g` onto the in-bounds neighbours of `q`.
fn scatter_bilinear(grad: &mut DepthMap, q: Pixel, g: f64) {
    let (w, h) = (grad.width() as f64, grad.height() as f64);
    if !(q.u > -1.0 && q.v > -1.0 && q.u < w && q.v < h) {
        return;
    }
    let u0 = q.u.floor();
    let v0 = q.v.floor();
    let (fu, fv) = (q.u - u0, q.v - v0);
    let (iu, iv) = (u0 as i64, v0 as i64);
    for (du, dv, wt) in [
        (0, 0, (1.0 - fu) * (1.0 - fv)),
        (1, 0, fu * (1.0 - fv)),
        (0, 1, (1.0 - fu) * fv),
        (1, 1, fu * fv),
    ] {
        let (x, y) = (iu + du, iv + dv);
        if x >= 0 && y >= 0 && x < w as i64 && y < h as i64 {
            *grad.get_mut(x as usize, y as usize) += g * wt;
        }
    }
}

/// Validity of every source under the current geometry (no other discrete state).
pub fn source_validity(inputs: &SnippetInputs<'_>) -> Vec<Mask> {
    inputs
        .sources
        .iter()
        .map(|s| {
            let coords = warp_coordinates(&inputs.intrinsics, &s.target_to_source, inputs.target.depth);
            validity(&coords, s.frame.image.width(), s.frame.image.height())
        })
        .collect()
}
