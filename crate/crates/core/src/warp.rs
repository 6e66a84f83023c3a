//! Inverse warping: bilinear sampling of images and depth, nearest-neighbour
//! sampling of labels, and full-frame view synthesis.
//!
//! Samples outside the source are read as zero. A sample is valid when its
//! coordinate lies inside `[0, W−1] × [0, H−1]` (so every neighbour with a
//! nonzero weight exists) and the point is in front of the camera; invalid
//! samples are excluded from every loss.

use crate::camera::{Intrinsics, Pixel, Pose};
use crate::raster::{DepthMap, Image, LabelMap, Mask, Raster, IGNORE_LABEL};

/// Pixel payloads that can be bilinearly blended.
pub trait Texel: Copy {
    const ZERO: Self;
    fn add_scaled(&mut self, other: &Self, w: f64);
    fn diff(&self, other: &Self) -> Self;
}

impl Texel for f64 {
    const ZERO: Self = 0.0;
    #[inline]
    fn add_scaled(&mut self, other: &Self, w: f64) {
        *self += w * other;
    }
    #[inline]
    fn diff(&self, other: &Self) -> Self {
        self - other
    }
}

impl Texel for [f64; 3] {
    const ZERO: Self = [0.0; 3];
    #[inline]
    fn add_scaled(&mut self, other: &Self, w: f64) {
        for c in 0..3 {
            self[c] += w * other[c];
        }
    }
    #[inline]
    fn diff(&self, other: &Self) -> Self {
        [self[0] - other[0], self[1] - other[1], self[2] - other[2]]
    }
}

/// Whether every bilinear neighbour with nonzero weight lies inside a `w × h` grid.
#[inline]
pub fn in_bounds(p: Pixel, width: usize, height: usize) -> bool {
    p.u >= 0.0 && p.v >= 0.0 && p.u <= (width - 1) as f64 && p.v <= (height - 1) as f64
}

/// Bilinear value and its partial derivatives along `u` and `v`.
///
/// The cell is chosen by `floor`, so on lattice lines the derivative is the
/// one of the cell to the right (below).
#[inline]
pub fn bilinear_with_grad<T: Texel>(src: &Raster<T>, p: Pixel) -> (T, T, T) {
    let (w, h) = (src.width() as f64, src.height() as f64);
    if !(p.u > -1.0 && p.v > -1.0 && p.u < w && p.v < h) {
        return (T::ZERO, T::ZERO, T::ZERO);
    }
    let u0 = p.u.floor();
    let v0 = p.v.floor();
    let fu = p.u - u0;
    let fv = p.v - v0;
    let (iu, iv) = (u0 as i64, v0 as i64);
    let at = |du: i64, dv: i64| src.get_checked(iu + du, iv + dv).copied().unwrap_or(T::ZERO);
    let (p00, p10, p01, p11) = (at(0, 0), at(1, 0), at(0, 1), at(1, 1));

    let mut value = T::ZERO;
    value.add_scaled(&p00, (1.0 - fu) * (1.0 - fv));
    value.add_scaled(&p10, fu * (1.0 - fv));
    value.add_scaled(&p01, (1.0 - fu) * fv);
    value.add_scaled(&p11, fu * fv);

    let mut du = T::ZERO;
    du.add_scaled(&p10.diff(&p00), 1.0 - fv);
    du.add_scaled(&p11.diff(&p01), fv);
    let mut dv = T::ZERO;
    dv.add_scaled(&p01.diff(&p00), 1.0 - fu);
    dv.add_scaled(&p11.diff(&p10), fu);
    (value, du, dv)
}

#[inline]
pub fn bilinear<T: Texel>(src: &Raster<T>, p: Pixel) -> T {
    bilinear_with_grad(src, p).0
}

/// Bilinear sample at every coordinate of `coords` (`None` = behind camera).
pub fn bilinear_sample<T: Texel>(src: &Raster<T>, coords: &Raster<Option<Pixel>>) -> (Raster<T>, Mask) {
    let values = coords.map(|c| match c {
        Some(p) if p.is_finite() => bilinear(src, *p),
        _ => T::ZERO,
    });
    (values, validity(coords, src.width(), src.height()))
}

pub fn validity(coords: &Raster<Option<Pixel>>, width: usize, height: usize) -> Mask {
    coords.map(|c| matches!(c, Some(p) if in_bounds(*p, width, height)))
}

/// Nearest-neighbour lookup, ties rounded away from zero.
#[inline]
pub fn nearest(src: &LabelMap, p: Pixel) -> Option<u8> {
    if !in_bounds(p, src.width(), src.height()) {
        return None;
    }
    Some(*src.get(p.u.round() as usize, p.v.round() as usize))
}

pub fn nearest_sample(src: &LabelMap, coords: &Raster<Option<Pixel>>) -> (LabelMap, Mask) {
    let labels = coords.map(|c| c.and_then(|p| nearest(src, p)).unwrap_or(IGNORE_LABEL));
    (labels, validity(coords, src.width(), src.height()))
}

pub fn sample_depth(src: &DepthMap, coords: &Raster<Option<Pixel>>) -> (DepthMap, Mask) {
    bilinear_sample(src, coords)
}

/// Source-view coordinates of every target pixel, `K T D(p) K⁻¹ p`.
pub fn warp_coordinates(k: &Intrinsics, target_to_source: &Pose, depth: &DepthMap) -> Raster<Option<Pixel>> {
    let identity = target_to_source.is_identity();
    Raster::from_fn(depth.width(), depth.height(), |u, v| {
        let d = *depth.get(u, v);
        if !(d > 0.0 && d.is_finite()) {
            return None;
        }
        if identity {
            return Some(Pixel::new(u as f64, v as f64));
        }
        let x = k.ray(Pixel::new(u as f64, v as f64)) * d;
        k.project(&target_to_source.transform(&x))
    })
}

/// Reconstructs the target view from `source` given target depth and the
/// target→source transform.
pub fn synthesize_view(
    source: &Image,
    target_depth: &DepthMap,
    k: &Intrinsics,
    target_to_source: &Pose,
) -> (Image, Mask) {
    let coords = warp_coordinates(k, target_to_source, target_depth);
    bilinear_sample(source, &coords)
}

pub fn synthesize_labels(
    source: &LabelMap,
    target_depth: &DepthMap,
    k: &Intrinsics,
    target_to_source: &Pose,
) -> (LabelMap, Mask) {
    let coords = warp_coordinates(k, target_to_source, target_depth);
    nearest_sample(source, &coords)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn ramp() -> DepthMap {
        DepthMap::from_fn(4, 3, |u, v| (u + 10 * v) as f64)
    }

    #[test]
    fn integer_coordinates_are_exact() {
        let src = ramp();
        for v in 0..3 {
            for u in 0..4 {
                let p = Pixel::new(u as f64, v as f64);
                assert_eq!(bilinear(&src, p), *src.get(u, v));
                assert!(in_bounds(p, 4, 3));
            }
        }
    }

    #[test]
    fn midpoint_interpolates_linearly() {
        let src = DepthMap::from_vec(2, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(bilinear(&src, Pixel::new(0.5, 0.0)), 0.5);
        let depth = DepthMap::from_vec(2, 1, vec![2.0, 4.0]).unwrap();
        let coords = Raster::from_vec(1, 1, vec![Some(Pixel::new(0.5, 0.0))]).unwrap();
        let (d, m) = sample_depth(&depth, &coords);
        assert_eq!(*d.get(0, 0), 3.0);
        assert!(*m.get(0, 0));
    }

    #[test]
    fn out_of_bounds_is_invalid() {
        let src = ramp();
        let coords = Raster::from_vec(
            3,
            1,
            vec![Some(Pixel::new(-0.5, 0.0)), Some(Pixel::new(3.0, 2.5)), None],
        )
        .unwrap();
        let (_, m) = bilinear_sample(&src, &coords);
        assert_eq!(m.data(), &[false, false, false]);
        let (_, m) = sample_depth(&src, &coords);
        assert_eq!(m.count(), 0);
    }

    #[test]
    fn far_outside_reads_zero_without_overflow() {
        let src = ramp();
        for p in [Pixel::new(1e300, 0.0), Pixel::new(-1e300, 1.0), Pixel::new(f64::NAN, 0.0)] {
            assert_eq!(bilinear_with_grad(&src, p), (0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn nearest_rounds_half_away_from_zero() {
        let labels = LabelMap::from_fn(3, 3, |u, v| (u + 3 * v) as u8);
        assert_eq!(nearest(&labels, Pixel::new(0.4, 0.4)), Some(0));
        assert_eq!(nearest(&labels, Pixel::new(0.6, 0.6)), Some(4));
        assert_eq!(nearest(&labels, Pixel::new(0.5, 1.5)), Some(7));
        assert_eq!(nearest(&labels, Pixel::new(2.2, 0.0)), None);
    }

    #[test]
    fn identity_synthesis_is_exact() {
        let img = Image::from_fn(9, 8, |u, v| [u as f64 / 9.0, v as f64 / 8.0, 0.25]);
        let depth = DepthMap::filled(9, 8, 3.0);
        let k = Intrinsics::new(10.0, 10.0, 4.0, 3.5).unwrap();
        let (out, valid) = synthesize_view(&img, &depth, &k, &Pose::identity());
        assert_eq!(valid.count(), 72);
        assert_eq!(out, img);
        let labels = LabelMap::from_fn(9, 8, |u, v| ((u * v) % 19) as u8);
        let (out, valid) = synthesize_labels(&labels, &depth, &k, &Pose::identity());
        assert_eq!(valid.count(), 72);
        assert_eq!(out, labels);
    }

    #[test]
    fn flipped_camera_is_all_invalid() {
        let img = Image::filled(8, 8, [0.5; 3]);
        let depth = DepthMap::filled(8, 8, 2.0);
        let k = Intrinsics::new(10.0, 10.0, 3.5, 3.5).unwrap();
        let flip = Pose::new(
            nalgebra::Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0),
            nalgebra::Vector3::zeros(),
        )
        .unwrap();
        let (_, valid) = synthesize_view(&img, &depth, &k, &flip);
        assert_eq!(valid.count(), 0);
        let labels = LabelMap::filled(8, 8, 3);
        let (out, valid) = synthesize_labels(&labels, &depth, &k, &flip);
        assert_eq!(valid.count(), 0);
        assert!(out.data().iter().all(|&l| l == IGNORE_LABEL));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let src = DepthMap::from_fn(6, 5, |u, v| ((u as f64) * 0.7).sin() + (v as f64 * 0.3).cos() * u as f64);
        let h = 1e-4;
        for &(u, v) in &[(1.3, 2.7), (0.2, 0.9), (3.55, 1.45), (4.9, 3.1)] {
            let (_, du, dv) = bilinear_with_grad(&src, Pixel::new(u, v));
            let fdu = (bilinear(&src, Pixel::new(u + h, v)) - bilinear(&src, Pixel::new(u - h, v))) / (2.0 * h);
            let fdv = (bilinear(&src, Pixel::new(u, v + h)) - bilinear(&src, Pixel::new(u, v - h))) / (2.0 * h);
            assert!((du - fdu).abs() <= 1e-5 * du.abs().max(1e-3), "{du} vs {fdu}");
            assert!((dv - fdv).abs() <= 1e-5 * dv.abs().max(1e-3), "{dv} vs {fdv}");
        }
    }

    proptest! {
        #[test]
        fn bilinear_is_convex(vals in prop::collection::vec(0.0f64..1.0, 20), u in 0.0f64..4.0, v in 0.0f64..3.0) {
            let src = DepthMap::from_vec(5, 4, vals).unwrap();
            let x = bilinear(&src, Pixel::new(u, v));
            let (u0, v0) = (u.floor() as usize, v.floor() as usize);
            let n = [*src.get(u0, v0), *src.get(u0 + 1, v0), *src.get(u0, v0 + 1), *src.get(u0 + 1, v0 + 1)];
            let lo = n.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = n.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(x >= lo - 1e-15 && x <= hi + 1e-15);
        }

        #[test]
        fn nearest_never_invents_labels(labels in prop::collection::vec(0u8..19, 16),
                                        coords in prop::collection::vec((-1.0f64..4.5, -1.0f64..4.5), 30)) {
            let src = LabelMap::from_vec(4, 4, labels.clone()).unwrap();
            let grid = Raster::from_vec(30, 1, coords.iter().map(|&(u, v)| Some(Pixel::new(u, v))).collect()).unwrap();
            let (out, valid) = nearest_sample(&src, &grid);
            for (l, ok) in out.data().iter().zip(valid.data()) {
                if *ok {
                    prop_assert!(labels.contains(l));
                } else {
                    prop_assert_eq!(*l, IGNORE_LABEL);
                }
            }
        }
    }
}
