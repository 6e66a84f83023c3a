//! Brute-force reference implementations of every loss, written as plain
//! per-pixel loops that share no code with the library, plus the random
//! instances and finite-difference checks used by `selftest`.

use nalgebra::Vector6;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::camera::{Intrinsics, Pixel, Pose};
use crate::error::Result;
use crate::fit::{FitFrame, SnippetProblem, TargetMode};
use crate::losses::{
    automask, masked_image_loss, min_reprojection_loss, point_loss_3d, recon_error, recon_loss, road_ordering_loss,
    semantic_loss, semantic_mask, smoothness_loss, ssim, total_loss, FrameView, LossConfig, LossWeights, PointSource,
    Reconstruction, SnippetInputs, SourceInput,
};
use crate::raster::{DepthMap, Image, LabelMap, Mask, IGNORE_LABEL};
use crate::scene::{PoseSpec, RenderedFrame, SceneSpec};
use crate::warp::{bilinear, synthesize_labels, synthesize_view, warp_coordinates};

/// Relative tolerance of the value comparisons.
pub const ORACLE_TOLERANCE: f64 = 1e-12;
/// Relative tolerance of the gradient check.
pub const GRADIENT_TOLERANCE: f64 = 1e-3;

/// One target frame with two or more sources and arbitrary semantic masks.
#[derive(Clone, Debug)]
pub struct Instance {
    pub k: Intrinsics,
    pub image: Image,
    pub labels: LabelMap,
    pub depth: DepthMap,
    pub sources: Vec<SourceFrame>,
    /// Independent random masks for the penalized losses.
    pub masks: Vec<Mask>,
    pub weights: LossWeights,
}

#[derive(Clone, Debug)]
pub struct SourceFrame {
    pub image: Image,
    pub labels: LabelMap,
    pub depth: DepthMap,
    pub target_to_source: Pose,
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    let xi = Vector6::from_fn(|i, _| if i < 3 { rng.gen_range(-0.08..0.08) } else { rng.gen_range(-0.4..0.4) });
    Pose::exp6(&xi)
}

fn random_labels(rng: &mut ChaCha8Rng, w: usize, h: usize) -> LabelMap {
    const POOL: [u8; 5] = [0, 1, 2, 13, IGNORE_LABEL];
    LabelMap::from_fn(w, h, |_, _| {
        if rng.gen_bool(0.05) {
            POOL[4]
        } else {
            POOL[rng.gen_range(0..4)]
        }
    })
}

impl Instance {
    /// A `w × h` instance with random textures, labels, depths in `[2, 10)` and small motions.
    pub fn random(rng: &mut ChaCha8Rng, w: usize, h: usize, n_sources: usize) -> Instance {
        let k = Intrinsics {
            fx: 0.8 * w as f64,
            fy: 0.8 * w as f64,
            cx: (w as f64 - 1.0) / 2.0,
            cy: (h as f64 - 1.0) / 2.0,
        };
        let mut image = || Image::from_fn(w, h, |_, _| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()]);
        let target_image = image();
        let source_images: Vec<Image> = (0..n_sources).map(|_| image()).collect();
        let mut depth = || DepthMap::from_fn(w, h, |_, _| rng.gen_range(2.0..10.0));
        let target_depth = depth();
        let source_depths: Vec<DepthMap> = (0..n_sources).map(|_| depth()).collect();
        let labels = random_labels(rng, w, h);
        let sources = source_images
            .into_iter()
            .zip(source_depths)
            .map(|(image, depth)| SourceFrame {
                image,
                labels: random_labels(rng, w, h),
                depth,
                target_to_source: random_pose(rng),
            })
            .collect();
        let masks = (0..n_sources).map(|_| Mask::from_fn(w, h, |_, _| rng.gen_bool(0.3))).collect();
        let weights = LossWeights {
            image: rng.gen(),
            semantic: rng.gen(),
            point: rng.gen(),
            road: rng.gen(),
            smooth: rng.gen(),
            alpha: rng.gen(),
            ..LossWeights::default()
        };
        Instance {
            k,
            image: target_image,
            labels,
            depth: target_depth,
            sources,
            masks,
            weights,
        }
    }

    fn width(&self) -> usize {
        self.image.width()
    }

    fn height(&self) -> usize {
        self.image.height()
    }
}

// ---------------------------------------------------------------------------
// Reference loops

fn px3(img: &Image, u: usize, v: usize) -> [f64; 3] {
    img.data()[v * img.width() + u]
}

fn mirror(i: i64, n: i64) -> i64 {
    if i < 0 {
        -i
    } else if i > n - 1 {
        2 * (n - 1) - i
    } else {
        i
    }
}

/// Channel-averaged SSIM at one pixel, two-pass moments over the reflected 3×3 window.
pub fn ssim_at(a: &Image, b: &Image, u: usize, v: usize) -> f64 {
    let (w, h) = (a.width() as i64, a.height() as i64);
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let mut total = 0.0;
    for c in 0..3 {
        let mut xs = Vec::with_capacity(9);
        let mut ys = Vec::with_capacity(9);
        for dv in -1..=1 {
            for du in -1..=1 {
                let uu = mirror(u as i64 + du, w) as usize;
                let vv = mirror(v as i64 + dv, h) as usize;
                xs.push(px3(a, uu, vv)[c]);
                ys.push(px3(b, uu, vv)[c]);
            }
        }
        let mx = xs.iter().sum::<f64>() / 9.0;
        let my = ys.iter().sum::<f64>() / 9.0;
        let vx = xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>() / 9.0;
        let vy = ys.iter().map(|y| (y - my) * (y - my)).sum::<f64>() / 9.0;
        let cxy = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / 9.0;
        total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    total / 3.0
}

pub fn re_at(a: &Image, b: &Image, u: usize, v: usize, alpha: f64) -> f64 {
    let (x, y) = (px3(a, u, v), px3(b, u, v));
    let l1 = ((x[0] - y[0]).abs() + (x[1] - y[1]).abs() + (x[2] - y[2]).abs()) / 3.0;
    alpha / 2.0 * (1.0 - ssim_at(a, b, u, v)) + (1.0 - alpha) * l1
}

/// `K T D(p) K⁻¹ p`, or `None` behind the camera.
pub fn project_at(k: &Intrinsics, pose: &Pose, u: usize, v: usize, d: f64) -> Option<(f64, f64)> {
    let x = [d * (u as f64 - k.cx) / k.fx, d * (v as f64 - k.cy) / k.fy, d];
    let r = &pose.rotation;
    let t = &pose.translation;
    let mut y = [0.0; 3];
    for i in 0..3 {
        y[i] = r[(i, 0)] * x[0] + r[(i, 1)] * x[1] + r[(i, 2)] * x[2] + t[i];
    }
    if y[2] <= 1e-6 {
        return None;
    }
    Some((k.fx * y[0] / y[2] + k.cx, k.fy * y[1] / y[2] + k.cy))
}

fn inside(q: (f64, f64), w: usize, h: usize) -> bool {
    q.0 >= 0.0 && q.1 >= 0.0 && q.0 <= (w - 1) as f64 && q.1 <= (h - 1) as f64
}

/// Bilinear sample with zero outside the grid, one channel at a time.
fn sample(w: usize, h: usize, get: impl Fn(usize, usize) -> f64, q: (f64, f64)) -> f64 {
    let (u0, v0) = (q.0.floor(), q.1.floor());
    let (a, b) = (q.0 - u0, q.1 - v0);
    let mut out = 0.0;
    for (du, dv, wt) in [(0, 0, (1.0 - a) * (1.0 - b)), (1, 0, a * (1.0 - b)), (0, 1, (1.0 - a) * b), (1, 1, a * b)] {
        let (uu, vv) = (u0 as i64 + du, v0 as i64 + dv);
        if uu >= 0 && vv >= 0 && (uu as usize) < w && (vv as usize) < h {
            out += wt * get(uu as usize, vv as usize);
        }
    }
    out
}

/// Per-source warped quantities at every pixel.
struct Warped {
    valid: Vec<bool>,
    image: Image,
    labels: Vec<u8>,
    pe: Vec<f64>,
}

fn warp_source(inst: &Instance, s: &SourceFrame) -> Warped {
    let (w, h) = (inst.width(), inst.height());
    let mut valid = vec![false; w * h];
    let mut img = vec![[0.0; 3]; w * h];
    let mut labels = vec![IGNORE_LABEL; w * h];
    let mut pe = vec![0.0; w * h];
    let back = s.target_to_source.inverse();
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            let d = inst.depth.data()[i];
            let Some(q) = project_at(&inst.k, &s.target_to_source, u, v, d) else {
                continue;
            };
            for c in 0..3 {
                img[i][c] = sample(w, h, |a, b| px3(&s.image, a, b)[c], q);
            }
            let ds = sample(w, h, |a, b| s.depth.data()[b * w + a], q);
            let p_t = [d * (u as f64 - inst.k.cx) / inst.k.fx, d * (v as f64 - inst.k.cy) / inst.k.fy, d];
            let p_s = [ds * (q.0 - inst.k.cx) / inst.k.fx, ds * (q.1 - inst.k.cy) / inst.k.fy, ds];
            let mut e = 0.0;
            for r in 0..3 {
                let y = back.rotation[(r, 0)] * p_s[0]
                    + back.rotation[(r, 1)] * p_s[1]
                    + back.rotation[(r, 2)] * p_s[2]
                    + back.translation[r];
                e += (p_t[r] - y).abs();
            }
            pe[i] = e;
            if inside(q, w, h) {
                valid[i] = true;
                labels[i] = s.labels.data()[q.1.round() as usize * w + q.0.round() as usize];
            }
        }
    }
    Warped {
        valid,
        image: Image::from_vec(w, h, img).expect("shape"),
        labels,
        pe,
    }
}

fn identity_floor(inst: &Instance, u: usize, v: usize, alpha: f64) -> f64 {
    inst.sources
        .iter()
        .map(|s| re_at(&inst.image, &s.image, u, v, alpha))
        .fold(f64::INFINITY, f64::min)
}

/// Penalized minimum reprojection (the plain one with all masks clear): value and the per-pixel chosen source.
fn image_loss_bf(inst: &Instance, warped: &[Warped], masks: &[Vec<bool>], b: f64, alpha: f64) -> (f64, Vec<Option<usize>>) {
    let (w, h) = (inst.width(), inst.height());
    let mut sum = 0.0;
    let mut n = 0;
    let mut choice = vec![None; w * h];
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            let mut best: Option<(usize, f64)> = None;
            for (s, wp) in warped.iter().enumerate() {
                if !wp.valid[i] {
                    continue;
                }
                let mre = re_at(&inst.image, &wp.image, u, v, alpha) + if masks[s][i] { b } else { 0.0 };
                if best.is_none_or(|(_, x)| mre < x) {
                    best = Some((s, mre));
                }
            }
            if let Some((s, x)) = best {
                if x < identity_floor(inst, u, v, alpha) {
                    sum += x;
                    n += 1;
                    choice[i] = Some(s);
                }
            }
        }
    }
    (if n == 0 { 0.0 } else { sum / n as f64 }, choice)
}

fn point_loss_bf(inst: &Instance, warped: &[Warped], masks: &[Vec<bool>], h_pen: f64) -> f64 {
    let n_px = inst.width() * inst.height();
    let mut sum = 0.0;
    let mut n = 0;
    for i in 0..n_px {
        let best = warped
            .iter()
            .enumerate()
            .filter(|(_, wp)| wp.valid[i])
            .map(|(s, wp)| wp.pe[i] + if masks[s][i] { h_pen } else { 0.0 })
            .fold(f64::INFINITY, f64::min);
        if best < h_pen {
            sum += best;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn semantic_masks_bf(inst: &Instance, warped: &[Warped]) -> Vec<Vec<bool>> {
    warped
        .iter()
        .map(|wp| {
            (0..wp.valid.len())
                .map(|i| {
                    let (a, b) = (inst.labels.data()[i], wp.labels[i]);
                    wp.valid[i] && a != IGNORE_LABEL && b != IGNORE_LABEL && a != b
                })
                .collect()
        })
        .collect()
}

fn semantic_loss_bf(inst: &Instance, warped: &[Warped]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for (i, &t) in inst.labels.data().iter().enumerate() {
        if t == IGNORE_LABEL {
            continue;
        }
        let mut best: Option<f64> = None;
        for wp in warped {
            if wp.valid[i] && wp.labels[i] != IGNORE_LABEL {
                let miss = if wp.labels[i] == t { 0.0 } else { 1.0 };
                best = Some(best.map_or(miss, |b: f64| b.min(miss)));
            }
        }
        if let Some(b) = best {
            sum += b;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn smoothness_bf(depth: &DepthMap, image: &Image) -> f64 {
    let (w, h) = depth.dims();
    let d = |u: usize, v: usize| depth.data()[v * w + u];
    let g = |a: [f64; 3], b: [f64; 3]| ((a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()) / 3.0;
    let mut sum = 0.0;
    for v in 0..h {
        for u in 0..w {
            if u + 1 < w {
                sum += (d(u + 1, v) - d(u, v)).abs() * (-g(px3(image, u + 1, v), px3(image, u, v))).exp();
            }
            if v + 1 < h {
                sum += (d(u, v + 1) - d(u, v)).abs() * (-g(px3(image, u, v + 1), px3(image, u, v))).exp();
            }
        }
    }
    sum / (w * h) as f64
}

fn road_bf(depth: &DepthMap, labels: &LabelMap, ground: &[u8]) -> usize {
    let (w, h) = depth.dims();
    let mut count = 0;
    for v in 1..h {
        for u in 0..w {
            let r = |vv: usize| ground.contains(&labels.data()[vv * w + u]);
            if r(v) && r(v - 1) && depth.data()[v * w + u] > depth.data()[(v - 1) * w + u] {
                count += 1;
            }
        }
    }
    count
}

// ---------------------------------------------------------------------------
// Comparison

/// Worst discrepancy of one quantity.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: &'static str,
    /// Relative error for values, mismatch count for discrete maps.
    pub error: f64,
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn mismatches(a: &[bool], b: &[bool]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| x != y).count() as f64
}

/// Compares every library loss on `inst` against the reference loops.
pub fn check_instance(inst: &Instance) -> Vec<Check> {
    let (w, h) = (inst.width(), inst.height());
    let wts = inst.weights;
    let alpha = wts.alpha;
    let ground = [0u8, 1];
    let warped: Vec<Warped> = inst.sources.iter().map(|s| warp_source(inst, s)).collect();
    let mut out = Vec::new();
    let max = |it: &mut dyn Iterator<Item = f64>| it.fold(0.0, f64::max);

    let views: Vec<(Image, Mask)> = inst
        .sources
        .iter()
        .map(|s| synthesize_view(&s.image, &inst.depth, &inst.k, &s.target_to_source))
        .collect();
    let coords: Vec<_> = inst
        .sources
        .iter()
        .map(|s| warp_coordinates(&inst.k, &s.target_to_source, &inst.depth))
        .collect();
    let mut e_proj: f64 = 0.0;
    for (s, c) in inst.sources.iter().zip(&coords) {
        for v in 0..h {
            for u in 0..w {
                let lib = c.get(u, v).map(|p: Pixel| (p.u, p.v));
                let bf = project_at(&inst.k, &s.target_to_source, u, v, *inst.depth.get(u, v));
                e_proj = e_proj.max(match (lib, bf) {
                    (Some(a), Some(b)) => rel(a.0, b.0).max(rel(a.1, b.1)),
                    (None, None) => 0.0,
                    _ => 1.0,
                });
            }
        }
    }
    out.push(Check { name: "projection", error: e_proj });
    let e_view = max(&mut views.iter().zip(&warped).flat_map(|((img, valid), wp)| {
        let m = mismatches(valid.data(), &wp.valid);
        img.data()
            .iter()
            .zip(wp.image.data())
            .map(|(a, b)| (0..3).map(|c| rel(a[c], b[c])).fold(0.0, f64::max))
            .chain(std::iter::once(m))
            .collect::<Vec<_>>()
    }));
    out.push(Check { name: "view synthesis", error: e_view });

    let s_lib = ssim(&inst.image, &views[0].0);
    let e_ssim = max(&mut (0..h).flat_map(|v| (0..w).map(move |u| (u, v))).map(|(u, v)| {
        rel(*s_lib.get(u, v), ssim_at(&inst.image, &views[0].0, u, v))
    }));
    out.push(Check { name: "ssim", error: e_ssim });

    let re_lib = recon_error(&inst.image, &views[0].0, alpha);
    let e_re = max(&mut (0..h).flat_map(|v| (0..w).map(move |u| (u, v))).map(|(u, v)| {
        rel(*re_lib.get(u, v), re_at(&inst.image, &views[0].0, u, v, alpha))
    }));
    out.push(Check { name: "reconstruction error", error: e_re });

    let (mut sum, mut n) = (0.0, 0);
    for i in 0..w * h {
        if warped[0].valid[i] {
            sum += re_at(&inst.image, &warped[0].image, i % w, i / w, alpha);
            n += 1;
        }
    }
    let bf_recon = if n == 0 { 0.0 } else { sum / n as f64 };
    out.push(Check {
        name: "reconstruction loss",
        error: rel(recon_loss(&inst.image, &views[0].0, &views[0].1, alpha), bf_recon),
    });

    let recons: Vec<Reconstruction<'_>> = views.iter().map(|(i, m)| Reconstruction { image: i, valid: m }).collect();
    let source_images: Vec<&Image> = inst.sources.iter().map(|s| &s.image).collect();
    let mu = automask(&inst.image, &recons, &source_images, alpha);
    let mu_bf: Vec<bool> = (0..w * h)
        .map(|i| {
            let (u, v) = (i % w, i / w);
            let best = warped
                .iter()
                .filter(|wp| wp.valid[i])
                .map(|wp| re_at(&inst.image, &wp.image, u, v, alpha))
                .fold(f64::INFINITY, f64::min);
            best < identity_floor(inst, u, v, alpha)
        })
        .collect();
    out.push(Check { name: "automask", error: mismatches(mu.data(), &mu_bf) });

    let clear = vec![vec![false; w * h]; inst.sources.len()];
    let (bf_minrep, _) = image_loss_bf(inst, &warped, &clear, wts.image_penalty, alpha);
    out.push(Check {
        name: "minimum reprojection",
        error: rel(min_reprojection_loss(&inst.image, &recons, &source_images, alpha), bf_minrep),
    });

    out.push(Check {
        name: "smoothness",
        error: rel(smoothness_loss(&inst.depth, &inst.image), smoothness_bf(&inst.depth, &inst.image)),
    });

    let warped_labels: Vec<(LabelMap, Mask)> = inst
        .sources
        .iter()
        .map(|s| synthesize_labels(&s.labels, &inst.depth, &inst.k, &s.target_to_source))
        .collect();
    let pairs: Vec<(&LabelMap, &Mask)> = warped_labels.iter().map(|(l, m)| (l, m)).collect();
    out.push(Check {
        name: "semantic loss",
        error: rel(semantic_loss(&inst.labels, &pairs), semantic_loss_bf(inst, &warped)),
    });

    let m_bf = semantic_masks_bf(inst, &warped);
    let e_mask = warped_labels
        .iter()
        .zip(&m_bf)
        .map(|((l, valid), bf)| mismatches(semantic_mask(&inst.labels, l, valid).data(), bf))
        .sum();
    out.push(Check { name: "semantic mask", error: e_mask });

    let rand_masks: Vec<Vec<bool>> = inst.masks.iter().map(|m| m.data().to_vec()).collect();
    let lib_masked = masked_image_loss(&inst.image, &recons, &source_images, Some(&inst.masks), wts.image_penalty, alpha);
    let (bf_masked, choice_masked) = image_loss_bf(inst, &warped, &rand_masks, wts.image_penalty, alpha);
    let choice_err = lib_masked
        .choice
        .data()
        .iter()
        .zip(&choice_masked)
        .filter(|(a, b)| a.map(usize::from) != **b)
        .count() as f64;
    out.push(Check { name: "masked image loss", error: rel(lib_masked.value, bf_masked).max(choice_err) });

    let road = road_ordering_loss(&inst.depth, &inst.labels, &ground);
    let bf_road = road_bf(&inst.depth, &inst.labels, &ground);
    out.push(Check {
        name: "road ordering",
        error: rel(road.value, bf_road as f64 / (w * h) as f64) + (road.violations as f64 - bf_road as f64).abs(),
    });

    let point_sources: Vec<PointSource<'_>> = inst
        .sources
        .iter()
        .map(|s| PointSource { depth: &s.depth, target_to_source: s.target_to_source })
        .collect();
    let lib_point = point_loss_3d(&inst.k, &inst.depth, &point_sources, Some(&inst.masks), wts.point_penalty);
    out.push(Check {
        name: "point loss",
        error: rel(lib_point.value, point_loss_bf(inst, &warped, &rand_masks, wts.point_penalty)),
    });

    let config = LossConfig {
        weights: wts,
        semantic_masking: true,
        ground_classes: ground.to_vec(),
    };
    let inputs = SnippetInputs {
        intrinsics: inst.k,
        target: FrameView { image: &inst.image, labels: &inst.labels, depth: &inst.depth },
        sources: inst
            .sources
            .iter()
            .map(|s| SourceInput {
                frame: FrameView { image: &s.image, labels: &s.labels, depth: &s.depth },
                target_to_source: s.target_to_source,
            })
            .collect(),
    };
    let report = total_loss(&inputs, &config);
    let (l_img, _) = image_loss_bf(inst, &warped, &m_bf, wts.image_penalty, alpha);
    let l_3d = point_loss_bf(inst, &warped, &m_bf, wts.point_penalty);
    let bf_total = wts.image * l_img
        + wts.semantic * semantic_loss_bf(inst, &warped)
        + wts.point * l_3d
        + wts.road * bf_road as f64 / (w * h) as f64
        + wts.smooth * smoothness_bf(&inst.depth, &inst.image);
    out.push(Check { name: "total loss", error: rel(report.total, bf_total) });
    out
}

/// Worst error per check over a batch of random instances.
#[derive(Clone, Debug, Serialize)]
pub struct OracleSummary {
    pub instances: usize,
    pub checks: Vec<Check>,
}

impl OracleSummary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.error <= ORACLE_TOLERANCE)
    }
}

/// Runs [`check_instance`] on `count` random 8×8 two-source instances.
pub fn oracle_suite(seed: u64, count: usize) -> OracleSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: Vec<Check> = Vec::new();
    for _ in 0..count {
        let inst = Instance::random(&mut rng, 8, 8, 2);
        for c in check_instance(&inst) {
            match worst.iter_mut().find(|w| w.name == c.name) {
                Some(w) => w.error = w.error.max(c.error),
                None => worst.push(c),
            }
        }
    }
    OracleSummary {
        instances: count,
        checks: worst,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradientReport {
    pub depth_samples: usize,
    pub worst_depth: f64,
    pub worst_pose: f64,
}

impl GradientReport {
    pub fn passed(&self) -> bool {
        self.worst_depth <= GRADIENT_TOLERANCE && self.worst_pose <= GRADIENT_TOLERANCE
    }
}

/// Sub-pixel margin kept between warped coordinates and lattice lines, so
/// that finite-difference steps never change the bilinear cell.
const LATTICE_MARGIN: f64 = 1e-3;

/// Margin in meters kept between each component of the 3D point residual
/// and zero, where the L1 point error has its kinks.
const POINT_MARGIN: f64 = 1e-4;

fn near_kink(k: &Intrinsics, pose: &Pose, depth: &DepthMap, source_depth: &DepthMap) -> Option<usize> {
    let gap = |x: f64| (x - x.round()).abs();
    let back = pose.inverse();
    let coords = warp_coordinates(k, pose, depth);
    coords.data().iter().enumerate().position(|(i, c)| {
        let Some(q) = c else { return false };
        if gap(q.u) < LATTICE_MARGIN || gap(q.v) < LATTICE_MARGIN {
            return true;
        }
        let (u, v) = (i % depth.width(), i / depth.width());
        let p_t = k.ray(Pixel::new(u as f64, v as f64)) * depth.data()[i];
        let p_s = back.transform(&(k.ray(*q) * bilinear(source_depth, *q)));
        (p_t - p_s).iter().any(|r| r.abs() < POINT_MARGIN)
    })
}

/// Per-pixel redraws before a configuration is abandoned; some pixels sit on
/// a lattice line for every depth under a given motion.
const MAX_REDRAWS: usize = 16;

fn draw_depths(rng: &mut ChaCha8Rng, k: &Intrinsics, forward: &Pose, frames: &[RenderedFrame]) -> Option<Vec<DepthMap>> {
    let mut jitter = |d: f64| d * (1.0 + rng.gen_range(-0.08..0.08));
    let mut depths: Vec<DepthMap> = frames.iter().map(|f| f.depth.map(|&d| jitter(d))).collect();
    let mut redraws: Vec<Vec<usize>> = depths.iter().map(|d| vec![0; d.len()]).collect();
    // Redrawing a pixel also moves the other frame's residuals, so sweep until both are clear.
    let poses = [*forward, forward.inverse()];
    loop {
        let mut redrawn = false;
        for t in 0..2 {
            while let Some(i) = near_kink(k, &poses[t], &depths[t], &depths[1 - t]) {
                redraws[t][i] += 1;
                if redraws[t][i] > MAX_REDRAWS {
                    return None;
                }
                depths[t].data_mut()[i] = jitter(frames[t].depth.data()[i]);
                redrawn = true;
            }
        }
        if !redrawn {
            return Some(depths);
        }
    }
}

fn grad_rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Analytic against central-difference gradients of the total objective on a
/// rendered 64×32 two-frame snippet with perturbed depth and pose, masks frozen.
pub fn gradient_check(seed: u64, depth_samples: usize) -> Result<GradientReport> {
    let spec = SceneSpec::wall_and_ground(
        64,
        32,
        8.0,
        vec![
            PoseSpec::default(),
            PoseSpec {
                rotation: [0.0, 0.01, 0.0],
                translation: [0.3, 0.0, 0.1],
            },
        ],
    );
    let frames = spec.render_all()?;
    let fit_frames: Vec<FitFrame<'_>> = frames.iter().map(|f| FitFrame { image: &f.image, labels: &f.labels }).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = spec.relative_pose(0, 1).log6()?;
    let (motion, mut depths) = loop {
        let motion = gt + Vector6::from_fn(|_, _| rng.gen_range(-0.01..0.01));
        if let Some(depths) = draw_depths(&mut rng, &spec.intrinsics, &Pose::exp6(&motion), &frames) {
            break (motion, depths);
        }
    };
    let loss = LossConfig {
        weights: LossWeights {
            road: 0.5,
            smooth: 0.05,
            ..LossWeights::default()
        },
        ..LossConfig::default()
    };
    let problem = SnippetProblem::new(spec.intrinsics, fit_frames, loss, TargetMode::All)?;
    let motions = [motion];
    let sel = problem.selections(&depths, &motions)?;
    let g = problem.gradient(&depths, &motions, &sel);
    let reference = problem.reference();
    let n = depths[reference].len();
    let mut worst_depth: f64 = 0.0;
    for _ in 0..depth_samples {
        let i = rng.gen_range(0..n);
        let fd = problem.depth_derivative(&mut depths, &motions, &sel, reference, i, 1e-4);
        worst_depth = worst_depth.max(grad_rel(g.depths[reference].data()[i], fd));
    }
    let mut worst_pose: f64 = 0.0;
    for c in 0..6 {
        let fd = problem.motion_derivative(&depths, &motions, &sel, 0, c, 1e-6);
        worst_pose = worst_pose.max(grad_rel(g.motions[0][c], fd));
    }
    Ok(GradientReport {
        depth_samples,
        worst_depth,
        worst_pose,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_agrees_on_a_few_instances() {
        let s = oracle_suite(3, 10);
        for c in &s.checks {
            assert!(c.error <= ORACLE_TOLERANCE, "{}: {}", c.name, c.error);
        }
        assert_eq!(s.checks.len(), 14);
    }

    #[test]
    fn reference_ssim_closed_form() {
        let a = Image::filled(4, 4, [0.2; 3]);
        let b = Image::filled(4, 4, [0.4; 3]);
        let expected = (2.0 * 0.08 + 1e-4) / (0.04 + 0.16 + 1e-4);
        assert!((ssim_at(&a, &b, 0, 0) - expected).abs() < 1e-15);
    }

    #[test]
    fn reference_smoothness_hand_value() {
        // 1×4 depth with a unit step between the middle columns, flat image
        let d = DepthMap::from_vec(4, 1, vec![1.0, 1.0, 2.0, 2.0]).unwrap();
        let img = Image::filled(4, 1, [0.5; 3]);
        assert_eq!(smoothness_bf(&d, &img), 0.25);
    }

    #[test]
    fn reference_point_loss_drops_fully_masked_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inst = Instance::random(&mut rng, 8, 8, 2);
        let warped: Vec<Warped> = inst.sources.iter().map(|s| warp_source(&inst, s)).collect();
        let all = vec![vec![true; 64]; 2];
        assert_eq!(point_loss_bf(&inst, &warped, &all, 320.0), 0.0);
    }

    #[test]
    fn gradients_match_on_rendered_snippet() {
        let r = gradient_check(1, 20).unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
