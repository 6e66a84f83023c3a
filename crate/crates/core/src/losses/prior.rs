//! Depth priors: edge-aware smoothness and vertical ordering on road surfaces.

use crate::raster::{DepthMap, Image, LabelMap, Raster};

#[inline]
fn channel_mean_abs_diff(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()) / 3.0
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

/// Edge-aware weights `exp(−|∂I|)` for the forward differences along `u` and `v`.
fn edge_weights(image: &Image) -> (Raster<f64>, Raster<f64>) {
    let (w, h) = image.dims();
    let wu = Raster::from_fn(w, h, |u, v| {
        if u + 1 < w {
            (-channel_mean_abs_diff(image.get(u + 1, v), image.get(u, v))).exp()
        } else {
            0.0
        }
    });
    let wv = Raster::from_fn(w, h, |u, v| {
        if v + 1 < h {
            (-channel_mean_abs_diff(image.get(u, v + 1), image.get(u, v))).exp()
        } else {
            0.0
        }
    });
    (wu, wv)
}

/// Mean over pixels of `|∂u D| e^{−|∂u I|} + |∂v D| e^{−|∂v I|}` (forward differences).
pub fn smoothness_loss(depth: &DepthMap, image: &Image) -> f64 {
    let (w, h) = depth.dims();
    let (wu, wv) = edge_weights(image);
    let mut sum = 0.0;
    for v in 0..h {
        for u in 0..w {
            let d = *depth.get(u, v);
            if u + 1 < w {
                sum += (depth.get(u + 1, v) - d).abs() * wu.get(u, v);
            }
            if v + 1 < h {
                sum += (depth.get(u, v + 1) - d).abs() * wv.get(u, v);
            }
        }
    }
    sum / (w * h) as f64
}

/// Gradient of [`smoothness_loss`] w.r.t. depth, accumulated into `grad` with `scale`.
pub fn smoothness_backward(depth: &DepthMap, image: &Image, scale: f64, grad: &mut DepthMap) {
    let (w, h) = depth.dims();
    let (wu, wv) = edge_weights(image);
    let k = scale / (w * h) as f64;
    for v in 0..h {
        for u in 0..w {
            let d = *depth.get(u, v);
            if u + 1 < w {
                let g = k * sign(depth.get(u + 1, v) - d) * wu.get(u, v);
                *grad.get_mut(u + 1, v) += g;
                *grad.get_mut(u, v) -= g;
            }
            if v + 1 < h {
                let g = k * sign(depth.get(u, v + 1) - d) * wv.get(u, v);
                *grad.get_mut(u, v + 1) += g;
                *grad.get_mut(u, v) -= g;
            }
        }
    }
}

/// Vertical ordering prior on ground classes.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RoadOrdering {
    /// Inverted pairs (pixel deeper than the one above it), before normalization.
    pub violations: usize,
    /// `violations / (W·H)`.
    pub value: f64,
    /// Hinge surrogate `Σ max(0, D(u,v) − D(u,v−1)) / (W·H)`.
    pub hinge: f64,
}

fn is_ground(classes: &[u8], l: u8) -> bool {
    classes.contains(&l)
}

pub fn road_ordering_loss(depth: &DepthMap, labels: &LabelMap, ground_classes: &[u8]) -> RoadOrdering {
    let (w, h) = depth.dims();
    let mut violations = 0usize;
    let mut hinge = 0.0;
    for v in 1..h {
        for u in 0..w {
            if is_ground(ground_classes, *labels.get(u, v)) && is_ground(ground_classes, *labels.get(u, v - 1)) {
                let diff = depth.get(u, v) - depth.get(u, v - 1);
                if diff > 0.0 {
                    violations += 1;
                    hinge += diff;
                }
            }
        }
    }
    let n = (w * h) as f64;
    RoadOrdering {
        violations,
        value: violations as f64 / n,
        hinge: hinge / n,
    }
}

/// Gradient of the hinge surrogate, accumulated into `grad` with `scale`.
pub fn road_hinge_backward(depth: &DepthMap, labels: &LabelMap, ground_classes: &[u8], scale: f64, grad: &mut DepthMap) {
    let (w, h) = depth.dims();
    let k = scale / (w * h) as f64;
    for v in 1..h {
        for u in 0..w {
            if is_ground(ground_classes, *labels.get(u, v))
                && is_ground(ground_classes, *labels.get(u, v - 1))
                && depth.get(u, v) > depth.get(u, v - 1)
            {
                *grad.get_mut(u, v) += k;
                *grad.get_mut(u, v - 1) -= k;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_depth_is_smooth() {
        let d = DepthMap::filled(8, 8, 4.0);
        let img = Image::from_fn(8, 8, |u, v| [u as f64 / 8.0, v as f64 / 8.0, 0.1]);
        assert_eq!(smoothness_loss(&d, &img), 0.0);
        let mut g = DepthMap::filled(8, 8, 0.0);
        smoothness_backward(&d, &img, 1.0, &mut g);
        assert!(g.data().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn single_step_on_flat_image() {
        let d = DepthMap::from_vec(4, 1, vec![1.0, 1.0, 2.0, 2.0]).unwrap();
        let img = Image::filled(4, 1, [0.5; 3]);
        // one step of height 1 weighted by exp(0), averaged over 4 pixels
        assert_eq!(smoothness_loss(&d, &img) * 4.0, 1.0);
    }

    #[test]
    fn strong_edges_suppress_the_penalty() {
        let d = DepthMap::from_vec(2, 1, vec![1.0, 2.0]).unwrap();
        let weak = smoothness_loss(&d, &Image::from_vec(2, 1, vec![[0.0; 3], [0.1; 3]]).unwrap());
        let strong = smoothness_loss(&d, &Image::from_vec(2, 1, vec![[0.0; 3], [1.0; 3]]).unwrap());
        assert!(strong < weak);
        assert!((strong - (-1.0f64).exp() / 2.0).abs() < 1e-15);
        assert!((-50.0f64).exp() < 1e-20);
    }

    #[test]
    fn road_ordering_cases() {
        let labels = LabelMap::filled(3, 4, 0);
        let increasing_up = DepthMap::from_fn(3, 4, |_, v| 10.0 - v as f64);
        assert_eq!(road_ordering_loss(&increasing_up, &labels, &[0, 1]).violations, 0);

        let mut one = increasing_up.clone();
        *one.get_mut(1, 2) = 20.0; // deeper than (1, 1) above it
        let r = road_ordering_loss(&one, &labels, &[0, 1]);
        assert_eq!(r.violations, 1);
        assert_eq!(r.value, 1.0 / 12.0);

        let no_road = LabelMap::filled(3, 4, 2);
        let inverted = DepthMap::from_fn(3, 4, |_, v| 1.0 + v as f64);
        assert_eq!(road_ordering_loss(&inverted, &no_road, &[0, 1]).value, 0.0);
        assert_eq!(road_ordering_loss(&inverted, &labels, &[0, 1]).violations, 9);
    }

    #[test]
    fn hinge_gradient_pushes_pairs_apart() {
        let labels = LabelMap::filled(1, 2, 1);
        let d = DepthMap::from_vec(1, 2, vec![1.0, 3.0]).unwrap();
        let mut g = DepthMap::filled(1, 2, 0.0);
        road_hinge_backward(&d, &labels, &[0, 1], 1.0, &mut g);
        assert_eq!(g.data(), &[-0.5, 0.5]);
        assert_eq!(road_ordering_loss(&d, &labels, &[0, 1]).hinge, 1.0);
    }
}
