//! Direct recovery of per-pixel depth and inter-frame motion on a snippet by
//! block descent on the total loss.
//!
//! Depth is optimized as log-depth, motion as one axis-angle/translation
//! 6-vector per adjacent frame pair (`T_{j→j+1} = exp6(ξ_j)`). Discrete loss
//! state is frozen between refreshes, so every accepted step strictly
//! decreases the objective it was taken on.

use nalgebra::{DMatrix, DVector, Matrix4, Vector6};
use serde::{Deserialize, Serialize};

use crate::camera::{Intrinsics, Pose};
use crate::error::{Error, Result};
use crate::losses::total::{evaluate, objective_gradient, total_loss, FrameView, Selection, SnippetInputs, SourceInput};
use crate::losses::{LossConfig, LossReport, LossTerms};
use crate::raster::{DepthMap, Image, LabelMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    Analytic,
    FiniteDifference,
}

/// Which frames play the target role in the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    /// Only the reference frame; other depths are reached through the 3D loss.
    Reference,
    /// Every frame in turn, each reconstructed from all the others.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub loss: LossConfig,
    pub max_iterations: usize,
    /// Initial largest per-pixel log-depth change of a depth step.
    pub depth_step: f64,
    /// Initial per-component pose step.
    pub pose_step: f64,
    /// Stop when an iteration lowers the objective by less than this fraction.
    pub tolerance: f64,
    pub gradient_mode: GradientMode,
    /// Iterations between recomputations of the frozen discrete state.
    pub mask_refresh: usize,
    pub optimize_depth: bool,
    pub optimize_pose: bool,
    pub targets: TargetMode,
    pub max_backtracks: usize,
    /// Upper bound on the per-pixel log-depth change of one step.
    pub max_depth_step: f64,
    /// Levels of the block-sum pyramid that preconditions the depth gradient.
    pub depth_levels: usize,
    /// Upper bound on any single pose-parameter step.
    pub max_pose_step: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            max_iterations: 500,
            depth_step: 0.02,
            pose_step: 1e-3,
            tolerance: 1e-9,
            gradient_mode: GradientMode::Analytic,
            mask_refresh: 10,
            optimize_depth: true,
            optimize_pose: true,
            targets: TargetMode::All,
            max_backtracks: 30,
            max_depth_step: 0.2,
            max_pose_step: 0.05,
            depth_levels: 6,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.depth_step > 0.0 && self.pose_step > 0.0) {
            return Err(Error::Config("step sizes must be positive".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("tolerance must be positive".into()));
        }
        if self.mask_refresh == 0 {
            return Err(Error::Config("mask refresh period must be at least 1".into()));
        }
        if self.depth_levels == 0 {
            return Err(Error::Config("depth preconditioner needs at least one level".into()));
        }
        if !(self.max_depth_step >= self.depth_step && self.max_pose_step >= self.pose_step) {
            return Err(Error::Config("maximum steps must be at least the initial steps".into()));
        }
        Ok(())
    }
}

/// One frame of a snippet.
#[derive(Clone, Copy)]
pub struct FitFrame<'a> {
    pub image: &'a Image,
    pub labels: &'a LabelMap,
}

/// Starting point of a fit.
#[derive(Clone, Debug)]
pub struct FitInit {
    /// Uniform depth used when `depths` is absent.
    pub depth: f64,
    pub depths: Option<Vec<DepthMap>>,
    /// `T_{j→j+1}` per adjacent pair; zero motion when absent.
    pub motions: Option<Vec<Pose>>,
}

impl Default for FitInit {
    fn default() -> Self {
        Self {
            depth: 10.0,
            depths: None,
            motions: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    /// Objective under the discrete state in force at this iteration.
    pub objective: f64,
    /// Terms of the reference-frame loss.
    pub terms: LossTerms,
    /// Mean per-parameter step sizes.
    pub depth_step: f64,
    pub pose_step: f64,
    pub refreshed: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "status", content = "detail")]
pub enum FitStatus {
    Converged,
    MaxIterations,
    /// No active block could decrease the objective after full backtracking.
    Stalled(String),
}

#[derive(Clone, Debug)]
pub struct FitState {
    pub log_depths: Vec<DepthMap>,
    pub motions: Vec<Vector6<f64>>,
    pub iteration: usize,
    pub history: Vec<LogEntry>,
    pub status: FitStatus,
}

impl FitState {
    pub fn depths(&self) -> Vec<DepthMap> {
        self.log_depths.iter().map(|l| l.map(|x| x.exp())).collect()
    }

    /// `T_{j→j+1}` for every adjacent pair.
    pub fn motion_poses(&self) -> Vec<Pose> {
        self.motions.iter().map(Pose::exp6).collect()
    }

    /// Camera-to-world trajectory anchored at identity for frame 0.
    pub fn trajectory(&self) -> Vec<Pose> {
        let mut out = vec![Pose::identity()];
        for m in self.motion_poses() {
            let last = *out.last().unwrap();
            out.push(last.compose(&m.inverse()));
        }
        out
    }
}

pub struct FitOutcome {
    pub state: FitState,
    /// Fresh evaluation of the reference-frame loss at the final state.
    pub report: LossReport,
}

/// Index of the frame treated as target: the middle one, or 0 for two frames.
pub fn reference_frame(n: usize) -> usize {
    if n <= 2 {
        0
    } else {
        n / 2
    }
}

/// The fit objective as a function of depth maps and motion parameters.
pub struct SnippetProblem<'a> {
    pub intrinsics: Intrinsics,
    pub frames: Vec<FitFrame<'a>>,
    pub loss: LossConfig,
    pub targets: Vec<usize>,
}

/// Gradients w.r.t. raw depth (not log-depth) and motion parameters.
#[derive(Clone, Debug)]
pub struct ProblemGradient {
    pub depths: Vec<DepthMap>,
    pub motions: Vec<Vector6<f64>>,
}

impl<'a> SnippetProblem<'a> {
    pub fn new(intrinsics: Intrinsics, frames: Vec<FitFrame<'a>>, loss: LossConfig, mode: TargetMode) -> Result<Self> {
        intrinsics.validate()?;
        if frames.len() < 2 {
            return Err(Error::Config(format!("a snippet needs at least 2 frames, got {}", frames.len())));
        }
        let first = frames[0].image;
        for (i, f) in frames.iter().enumerate() {
            first.check_shape(f.image, &format!("frame {i} image"))?;
            first.check_shape(f.labels, &format!("frame {i} labels"))?;
            f.image.validate_intensities()?;
            f.labels.validate_labels()?;
        }
        let targets = match mode {
            TargetMode::Reference => vec![reference_frame(frames.len())],
            TargetMode::All => (0..frames.len()).collect(),
        };
        Ok(Self {
            intrinsics,
            frames,
            loss,
            targets,
        })
    }

    pub fn reference(&self) -> usize {
        reference_frame(self.frames.len())
    }

    fn check(&self, depths: &[DepthMap], motions: &[Vector6<f64>]) -> Result<()> {
        if depths.len() != self.frames.len() || motions.len() + 1 != self.frames.len() {
            return Err(Error::Shape(format!(
                "{} frames need {} depth maps and {} motions, got {} and {}",
                self.frames.len(),
                self.frames.len(),
                self.frames.len() - 1,
                depths.len(),
                motions.len()
            )));
        }
        for (i, d) in depths.iter().enumerate() {
            self.frames[0].image.check_shape(d, &format!("depth {i}"))?;
            d.validate_positive()?;
        }
        Ok(())
    }

    fn inputs<'b>(&'b self, target: usize, depths: &'b [DepthMap], chain: &PoseChain) -> SnippetInputs<'b> {
        let view = |i: usize| FrameView {
            image: self.frames[i].image,
            labels: self.frames[i].labels,
            depth: &depths[i],
        };
        SnippetInputs {
            intrinsics: self.intrinsics,
            target: view(target),
            sources: (0..self.frames.len())
                .filter(|&s| s != target)
                .map(|s| SourceInput {
                    frame: view(s),
                    target_to_source: Pose::from_matrix_unchecked(&chain.between(target, s)),
                })
                .collect(),
        }
    }

    /// Fresh discrete state for every target role.
    pub fn selections(&self, depths: &[DepthMap], motions: &[Vector6<f64>]) -> Result<Vec<Selection>> {
        self.check(depths, motions)?;
        let chain = PoseChain::new(motions);
        Ok(self
            .targets
            .iter()
            .map(|&t| Selection::compute(&self.inputs(t, depths, &chain), &self.loss))
            .collect())
    }

    /// Mean over target roles of the (hinge) objective, discrete state frozen.
    pub fn objective(&self, depths: &[DepthMap], motions: &[Vector6<f64>], selections: &[Selection]) -> f64 {
        let chain = PoseChain::new(motions);
        let sum: f64 = self
            .targets
            .iter()
            .zip(selections)
            .map(|(&t, sel)| evaluate(&self.inputs(t, depths, &chain), &self.loss, sel).objective(&self.loss.weights))
            .sum();
        sum / self.targets.len() as f64
    }

    /// Loss report of the reference frame with fresh discrete state.
    pub fn report(&self, depths: &[DepthMap], motions: &[Vector6<f64>]) -> Result<LossReport> {
        self.check(depths, motions)?;
        let chain = PoseChain::new(motions);
        Ok(total_loss(&self.inputs(self.reference(), depths, &chain), &self.loss))
    }

    pub fn reference_terms(&self, depths: &[DepthMap], motions: &[Vector6<f64>], selections: &[Selection]) -> LossTerms {
        let chain = PoseChain::new(motions);
        let r = self.reference();
        let idx = self.targets.iter().position(|&t| t == r).unwrap_or(0);
        evaluate(&self.inputs(self.targets[idx], depths, &chain), &self.loss, &selections[idx])
    }

    /// Analytic gradient of [`Self::objective`].
    pub fn gradient(&self, depths: &[DepthMap], motions: &[Vector6<f64>], selections: &[Selection]) -> ProblemGradient {
        let n = self.frames.len();
        let (w, h) = depths[0].dims();
        let chain = PoseChain::new(motions);
        let mut g_depth = vec![DepthMap::filled(w, h, 0.0); n];
        let mut g_between = vec![vec![Matrix4::<f64>::zeros(); n]; n];
        let scale = 1.0 / self.targets.len() as f64;
        for (&t, sel) in self.targets.iter().zip(selections) {
            let g = objective_gradient(&self.inputs(t, depths, &chain), &self.loss, sel);
            accumulate(&mut g_depth[t], &g.target_depth, scale);
            let sources = (0..n).filter(|&s| s != t);
            for (k, s) in sources.enumerate() {
                accumulate(&mut g_depth[s], &g.source_depths[k], scale);
                let m = &mut g_between[t][s];
                for r in 0..3 {
                    for c in 0..3 {
                        m[(r, c)] += scale * g.rotation[k][(r, c)];
                    }
                    m[(r, 3)] += scale * g.translation[k][r];
                }
            }
        }
        ProblemGradient {
            depths: g_depth,
            motions: chain.backward(&g_between),
        }
    }

    /// Central-difference gradient of [`Self::objective`] (steps in raw depth and in ξ).
    pub fn finite_difference_gradient(
        &self,
        depths: &[DepthMap],
        motions: &[Vector6<f64>],
        selections: &[Selection],
        depth_step: f64,
        pose_step: f64,
    ) -> ProblemGradient {
        let mut d = depths.to_vec();
        let mut g_depth: Vec<DepthMap> = depths.iter().map(|x| x.map(|_| 0.0)).collect();
        for f in 0..d.len() {
            for i in 0..d[f].len() {
                g_depth[f].data_mut()[i] = self.depth_derivative(&mut d, motions, selections, f, i, depth_step);
            }
        }
        let g_motion = (0..motions.len())
            .map(|j| Vector6::from_fn(|c, _| self.motion_derivative(depths, motions, selections, j, c, pose_step)))
            .collect();
        ProblemGradient {
            depths: g_depth,
            motions: g_motion,
        }
    }

    /// Central difference w.r.t. one depth value; `depths` is restored afterwards.
    pub fn depth_derivative(
        &self,
        depths: &mut [DepthMap],
        motions: &[Vector6<f64>],
        selections: &[Selection],
        frame: usize,
        index: usize,
        step: f64,
    ) -> f64 {
        let x0 = depths[frame].data()[index];
        depths[frame].data_mut()[index] = x0 + step;
        let fp = self.objective(depths, motions, selections);
        depths[frame].data_mut()[index] = x0 - step;
        let fm = self.objective(depths, motions, selections);
        depths[frame].data_mut()[index] = x0;
        (fp - fm) / (2.0 * step)
    }

    /// Central difference w.r.t. one motion parameter.
    pub fn motion_derivative(
        &self,
        depths: &[DepthMap],
        motions: &[Vector6<f64>],
        selections: &[Selection],
        pair: usize,
        component: usize,
        step: f64,
    ) -> f64 {
        let mut m = motions.to_vec();
        m[pair][component] += step;
        let fp = self.objective(depths, &m, selections);
        m[pair][component] -= 2.0 * step;
        let fm = self.objective(depths, &m, selections);
        (fp - fm) / (2.0 * step)
    }
}

fn accumulate(dst: &mut DepthMap, src: &DepthMap, scale: f64) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += scale * s;
    }
}

/// Relative transforms between every frame pair, composed from adjacent motions,
/// with the adjoint that maps matrix gradients back to the 6-vectors.
struct PoseChain {
    xis: Vec<Vector6<f64>>,
    steps: Vec<Matrix4<f64>>,
}

impl PoseChain {
    fn new(xis: &[Vector6<f64>]) -> Self {
        Self {
            xis: xis.to_vec(),
            steps: xis.iter().map(|x| Pose::exp6(x).to_matrix()).collect(),
        }
    }

    /// `A_{b−1} ⋯ A_a` for `a ≤ b`.
    fn forward_product(&self, a: usize, b: usize) -> Matrix4<f64> {
        (a..b).fold(Matrix4::identity(), |acc, j| self.steps[j] * acc)
    }

    /// `T_{a→b}`.
    fn between(&self, a: usize, b: usize) -> Matrix4<f64> {
        if a <= b {
            self.forward_product(a, b)
        } else {
            invert_rigid(&self.forward_product(b, a))
        }
    }

    /// `∂L/∂ξ` from `∂L/∂T_{a→b}` for all pairs (row `a`, column `b`).
    fn backward(&self, g: &[Vec<Matrix4<f64>>]) -> Vec<Vector6<f64>> {
        let n = self.steps.len() + 1;
        let derivs: Vec<[Matrix4<f64>; 6]> = self.xis.iter().map(Pose::exp6_derivatives).collect();
        let mut out = vec![Vector6::zeros(); self.steps.len()];
        for a in 0..n {
            for b in 0..n {
                let gm = &g[a][b];
                if a == b || gm.iter().all(|x| *x == 0.0) {
                    continue;
                }
                let (lo, hi) = (a.min(b), a.max(b));
                // for a > b, T_ab = T_ba⁻¹ and dT_ab = −T_ab dT_ba T_ab, so
                // ⟨G, dT_ab⟩ = ⟨−T_abᵀ G T_abᵀ, dT_ba⟩
                let g_fwd = if a < b {
                    *gm
                } else {
                    let t = self.between(a, b);
                    -(t.transpose() * gm * t.transpose())
                };
                for j in lo..hi {
                    let left = self.forward_product(j + 1, hi);
                    let right = self.forward_product(lo, j);
                    // ⟨G, L dA R⟩ = ⟨Lᵀ G Rᵀ, dA⟩
                    let inner = left.transpose() * g_fwd * right.transpose();
                    for c in 0..6 {
                        out[j][c] += inner.component_mul(&derivs[j][c]).sum();
                    }
                }
            }
        }
        out
    }
}

fn invert_rigid(m: &Matrix4<f64>) -> Matrix4<f64> {
    Pose::from_matrix_unchecked(m).inverse().to_matrix()
}

/// `Σ_l B_lᵀ B_l g`, where `B_l` sums `g` over `2^l × 2^l` blocks.
///
/// Coherent low-frequency components of the gradient are boosted relative to
/// per-pixel noise; the operator is positive semi-definite, so the result is
/// still a descent direction.
pub fn multiscale_precondition(g: &DepthMap, levels: usize) -> DepthMap {
    let (w, h) = g.dims();
    let mut out = g.clone();
    for l in 1..levels {
        let b = 1usize << l;
        if b > w.max(h) {
            break;
        }
        let (bw, bh) = (w.div_ceil(b), h.div_ceil(b));
        let mut sums = vec![0.0; bw * bh];
        for v in 0..h {
            for u in 0..w {
                sums[(v / b) * bw + u / b] += g.get(u, v);
            }
        }
        for v in 0..h {
            for u in 0..w {
                *out.get_mut(u, v) += sums[(v / b) * bw + u / b];
            }
        }
    }
    out
}

/// Consecutive fully failed iterations before a fit is declared stalled.
const STALL_PATIENCE: usize = 3;

/// Inverse-Hessian estimate for the stacked motion parameters.
struct Bfgs {
    h: DMatrix<f64>,
    prev: Option<(DVector<f64>, DVector<f64>)>,
    step: f64,
    max: f64,
}

impl Bfgs {
    fn new(step: f64, max: f64) -> Self {
        Self {
            h: DMatrix::zeros(0, 0),
            prev: None,
            step,
            max,
        }
    }

    fn scaled_identity(&self, g: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(g.len(), g.len()) * (self.step / g.amax().max(f64::MIN_POSITIVE))
    }

    /// Proposal at `x` with gradient `g`; the largest component is capped at `max`.
    fn propose(&mut self, x: &DVector<f64>, g: &DVector<f64>) -> DVector<f64> {
        match self.prev.take() {
            Some((xp, gp)) if self.h.nrows() == g.len() => {
                let s = x - xp;
                let y = g - gp;
                let sy = s.dot(&y);
                if sy > 1e-12 * s.norm() * y.norm() {
                    let rho = 1.0 / sy;
                    let n = g.len();
                    let a = DMatrix::identity(n, n) - &s * y.transpose() * rho;
                    self.h = &a * &self.h * a.transpose() + &s * s.transpose() * rho;
                }
            }
            _ => self.h = self.scaled_identity(g),
        }
        let mut dir = -(&self.h * g);
        if dir.dot(g) >= 0.0 {
            self.h = self.scaled_identity(g);
            dir = -(&self.h * g);
        }
        let peak = dir.amax();
        if peak > self.max {
            dir *= self.max / peak;
        }
        self.prev = Some((x.clone(), g.clone()));
        dir
    }

    /// Forgets curvature after a failed search and shrinks the fallback step.
    fn reset(&mut self) {
        self.prev = None;
        self.h = DMatrix::zeros(0, 0);
        self.step = (self.step * 0.5).max(1e-12);
    }

    fn scale(&self) -> f64 {
        if self.h.nrows() == 0 {
            self.step
        } else {
            self.h.diagonal().mean()
        }
    }
}

/// Recovers depth and motion for a snippet from images and segmentations.
pub fn fit_snippet(frames: &[FitFrame<'_>], intrinsics: &Intrinsics, config: &FitConfig, init: &FitInit) -> Result<FitOutcome> {
    config.validate()?;
    let problem = SnippetProblem::new(*intrinsics, frames.to_vec(), config.loss.clone(), config.targets)?;
    let n = frames.len();
    let (w, h) = frames[0].image.dims();

    let depths0 = match &init.depths {
        Some(d) => d.clone(),
        None => {
            if !(init.depth > 0.0 && init.depth.is_finite()) {
                return Err(Error::Domain(format!("initial depth {} must be positive", init.depth)));
            }
            vec![DepthMap::filled(w, h, init.depth); n]
        }
    };
    let motions0 = match &init.motions {
        Some(m) => m.iter().map(Pose::log6).collect::<Result<Vec<_>>>()?,
        None => vec![Vector6::zeros(); n.saturating_sub(1)],
    };
    problem.check(&depths0, &motions0)?;

    let mut state = FitState {
        log_depths: depths0.iter().map(|d| d.map(|x| x.ln())).collect(),
        motions: motions0,
        iteration: 0,
        history: Vec::new(),
        status: FitStatus::MaxIterations,
    };
    let mut depths = depths0;
    let mut depth_step = config.depth_step;
    // per-frame log-scale offsets, moved jointly
    let mut scale_bfgs = Bfgs::new(config.depth_step, config.max_depth_step);
    let mut scale_offsets = DVector::zeros(n);
    let mut pose_bfgs = Bfgs::new(config.pose_step, config.max_pose_step);
    let mut selections = Vec::new();
    let mut f = 0.0;
    let mut failures = 0;

    for it in 0..config.max_iterations {
        let refreshed = it % config.mask_refresh == 0;
        if refreshed {
            selections = problem.selections(&depths, &state.motions)?;
            f = problem.objective(&depths, &state.motions, &selections);
        }
        state.history.push(LogEntry {
            iteration: it,
            objective: f,
            terms: problem.reference_terms(&depths, &state.motions, &selections),
            depth_step: if config.optimize_depth { depth_step } else { 0.0 },
            pose_step: if config.optimize_pose { pose_bfgs.scale() } else { 0.0 },
            refreshed,
        });
        let f_start = f;
        let mut all_failed = true;

        // Whole-frame scale moves re-select the discrete state for every
        // candidate; the frozen state can pin the scale otherwise.
        if config.optimize_depth && refreshed {
            let g = block_gradient(&problem, config, &depths, &state.motions, &selections);
            let gs = DVector::from_iterator(
                n,
                depths
                    .iter()
                    .zip(&g.depths)
                    .map(|(d, gd)| d.data().iter().zip(gd.data()).map(|(x, y)| x * y).sum::<f64>()),
            );
            let dir = scale_bfgs.propose(&scale_offsets, &gs);
            let slope = gs.dot(&dir);
            let base = state.log_depths.clone();
            let trial = |s: f64| -> Vec<DepthMap> {
                base.iter()
                    .zip(dir.iter())
                    .map(|(l, c)| l.map(|x| (x + s * c).exp()))
                    .collect()
            };
            let fresh = |d: &[DepthMap]| -> Option<(Vec<Selection>, f64)> {
                let sel = problem.selections(d, &state.motions).ok()?;
                let value = problem.objective(d, &state.motions, &sel);
                Some((sel, value))
            };
            let result = line_search(f, slope, config.max_backtracks, |s| {
                fresh(&trial(s)).map_or(f64::INFINITY, |(_, v)| v)
            });
            match result {
                Some((s, _)) => {
                    depths = trial(s);
                    state.log_depths = depths.iter().map(|d| d.map(|x| x.ln())).collect();
                    scale_offsets += dir * s;
                    let (sel, value) = fresh(&depths).expect("accepted depths are valid");
                    selections = sel;
                    f = value;
                    all_failed = false;
                }
                None => scale_bfgs.reset(),
            }
        }

        if config.optimize_depth {
            let g = block_gradient(&problem, config, &depths, &state.motions, &selections);
            let g_log: Vec<DepthMap> = depths
                .iter()
                .zip(&g.depths)
                .map(|(d, gd)| DepthMap::from_fn(w, h, |u, v| d.get(u, v) * gd.get(u, v)))
                .collect();
            let dirs: Vec<DepthMap> = g_log
                .iter()
                .map(|gl| multiscale_precondition(gl, config.depth_levels).map(|x| -x))
                .collect();
            let peak = dirs.iter().flat_map(|d| d.data()).fold(0.0f64, |m, x| m.max(x.abs()));
            let slope: f64 = g_log
                .iter()
                .zip(&dirs)
                .map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>())
                .sum::<f64>()
                / peak.max(f64::MIN_POSITIVE);
            let base = state.log_depths.clone();
            let trial = |s: f64| -> Vec<DepthMap> {
                let k = s / peak.max(f64::MIN_POSITIVE);
                base.iter()
                    .zip(&dirs)
                    .map(|(l, d)| {
                        let mut out = l.clone();
                        for (x, y) in out.data_mut().iter_mut().zip(d.data()) {
                            *x += k * y;
                        }
                        out
                    })
                    .collect()
            };
            let result = if peak > 0.0 {
                line_search(f, depth_step * slope, config.max_backtracks, |s| {
                    let d: Vec<DepthMap> = trial(depth_step * s).iter().map(|l| l.map(|x| x.exp())).collect();
                    problem.objective(&d, &state.motions, &selections)
                })
            } else {
                None
            };
            match result {
                Some((s, fnew)) => {
                    state.log_depths = trial(depth_step * s);
                    depths = state.depths();
                    f = fnew;
                    depth_step = (2.0 * s * depth_step).min(config.max_depth_step);
                    all_failed = false;
                }
                None => depth_step = (depth_step * 0.5f64.powi(config.max_backtracks as i32)).max(1e-12),
            }
        }

        if config.optimize_pose {
            let g = block_gradient(&problem, config, &depths, &state.motions, &selections);
            let x = DVector::from_iterator(6 * (n - 1), state.motions.iter().flat_map(|m| m.iter().copied()));
            let gx = DVector::from_iterator(6 * (n - 1), g.motions.iter().flat_map(|m| m.iter().copied()));
            let dir = pose_bfgs.propose(&x, &gx);
            let slope = gx.dot(&dir);
            let base = state.motions.clone();
            let trial = |s: f64| -> Vec<Vector6<f64>> {
                base.iter()
                    .enumerate()
                    .map(|(j, m)| m + Vector6::from_fn(|c, _| s * dir[6 * j + c]))
                    .collect()
            };
            match line_search(f, slope, config.max_backtracks, |s| problem.objective(&depths, &trial(s), &selections)) {
                Some((s, fnew)) => {
                    state.motions = trial(s);
                    f = fnew;
                    all_failed = false;
                }
                None => pose_bfgs.reset(),
            }
        }

        state.iteration = it + 1;
        if !config.optimize_depth && !config.optimize_pose {
            state.status = FitStatus::Converged;
            break;
        }
        if all_failed {
            failures += 1;
            if failures >= STALL_PATIENCE {
                state.status = FitStatus::Stalled(format!(
                    "no block could decrease the objective {f:.6e} in {failures} consecutive iterations \
                     (last: {it}) after {} backtracks each",
                    config.max_backtracks
                ));
                break;
            }
            continue;
        }
        failures = 0;
        let rel = (f_start - f) / f_start.abs().max(f64::MIN_POSITIVE);
        if rel < config.tolerance {
            state.status = FitStatus::Converged;
            break;
        }
    }

    let report = problem.report(&depths, &state.motions)?;
    Ok(FitOutcome { state, report })
}

fn block_gradient(
    problem: &SnippetProblem<'_>,
    config: &FitConfig,
    depths: &[DepthMap],
    motions: &[Vector6<f64>],
    selections: &[Selection],
) -> ProblemGradient {
    match config.gradient_mode {
        GradientMode::Analytic => problem.gradient(depths, motions, selections),
        GradientMode::FiniteDifference => problem.finite_difference_gradient(depths, motions, selections, 1e-4, 1e-6),
    }
}

/// Backtracking along a proposal from its full length; returns the accepted
/// fraction and objective.
fn line_search(f0: f64, slope: f64, max_backtracks: usize, mut eval: impl FnMut(f64) -> f64) -> Option<(f64, f64)> {
    if !(slope < 0.0) {
        return None;
    }
    let mut s = 1.0;
    for _ in 0..=max_backtracks {
        let f = eval(s);
        if f < f0 && f <= f0 + 1e-4 * s * slope {
            return Some((s, f));
        }
        s *= 0.5;
    }
    None
}
