//! 3D point consistency between a target depth map and warped source depth maps.

use super::photometric::{mean_over_choice, select_min_below};
use crate::camera::{Intrinsics, Pixel, Point3, Pose};
use crate::raster::{DepthMap, Mask, Raster};
use crate::warp::{bilinear, validity, warp_coordinates};

/// `‖a − b‖₁`.
pub fn point_error(a: &Point3, b: &Point3) -> f64 {
    (a - b).abs().sum()
}

/// A source depth map with the target→source transform.
pub struct PointSource<'a> {
    pub depth: &'a DepthMap,
    pub target_to_source: Pose,
}

/// Per-pixel `pe` for one source, using precomputed warp coordinates.
/// Invalid pixels carry `0`.
pub(crate) fn point_error_map(
    k: &Intrinsics,
    target_depth: &DepthMap,
    source_depth: &DepthMap,
    target_to_source: &Pose,
    coords: &Raster<Option<Pixel>>,
    valid: &Mask,
) -> Raster<f64> {
    let back = target_to_source.inverse();
    Raster::from_fn(target_depth.width(), target_depth.height(), |u, v| {
        if !*valid.get(u, v) {
            return 0.0;
        }
        let q = coords.get(u, v).expect("valid pixels have coordinates");
        let p_t = k.ray(Pixel::new(u as f64, v as f64)) * *target_depth.get(u, v);
        let p_s = k.ray(q) * bilinear(source_depth, q);
        point_error(&p_t, &back.transform(&p_s))
    })
}

#[derive(Clone, Debug)]
pub struct PointLossMaps {
    pub value: f64,
    pub pe: Vec<Raster<f64>>,
    pub mpe: Vec<Raster<f64>>,
    pub valid: Vec<Mask>,
    pub choice: Raster<Option<u8>>,
}

/// Penalized minimum of the 3D point error over sources, kept where it stays below `penalty`.
pub fn point_loss_3d(
    k: &Intrinsics,
    target_depth: &DepthMap,
    sources: &[PointSource<'_>],
    masks: Option<&[Mask]>,
    penalty: f64,
) -> PointLossMaps {
    let mut pe = Vec::with_capacity(sources.len());
    let mut valid = Vec::with_capacity(sources.len());
    for src in sources {
        let coords = warp_coordinates(k, &src.target_to_source, target_depth);
        let ok = validity(&coords, src.depth.width(), src.depth.height());
        pe.push(point_error_map(k, target_depth, src.depth, &src.target_to_source, &coords, &ok));
        valid.push(ok);
    }
    let mpe = penalize(&pe, masks, penalty);
    let valid_refs: Vec<&Mask> = valid.iter().collect();
    let choice = select_min_below(&mpe, &valid_refs, |_, _| penalty);
    PointLossMaps {
        value: mean_over_choice(&mpe, &choice),
        pe,
        mpe,
        valid,
        choice,
    }
}

pub(crate) fn penalize(values: &[Raster<f64>], masks: Option<&[Mask]>, penalty: f64) -> Vec<Raster<f64>> {
    values
        .iter()
        .enumerate()
        .map(|(s, e)| match masks {
            Some(m) => Raster::from_fn(e.width(), e.height(), |u, v| {
                e.get(u, v) + if *m[s].get(u, v) { penalty } else { 0.0 }
            }),
            None => e.clone(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use nalgebra::Vector3;

    use super::*;

    #[test]
    fn point_error_examples() {
        let a = Vector3::new(0.0, 0.0, 2.0);
        let b = Vector3::new(1.0, 0.0, 2.0);
        assert_eq!(point_error(&a, &a), 0.0);
        assert_eq!(point_error(&a, &b), 1.0);
        assert_eq!(point_error(&b, &a), 1.0);
    }

    fn plane_setup() -> (Intrinsics, DepthMap, DepthMap, Pose) {
        let k = Intrinsics::new(20.0, 20.0, 7.5, 7.5).unwrap();
        // fronto-parallel plane at z = 5, camera moves 0.1 m to the left
        let dt = DepthMap::filled(16, 16, 5.0);
        let ds = DepthMap::filled(16, 16, 5.0);
        (k, dt, ds, Pose::from_translation(0.1, 0.0, 0.0))
    }

    #[test]
    fn consistent_plane_has_zero_error() {
        let (k, dt, ds, pose) = plane_setup();
        let out = point_loss_3d(&k, &dt, &[PointSource { depth: &ds, target_to_source: pose }], None, 320.0);
        assert!(out.value < 1e-12);
        assert!(out.choice.data().iter().filter(|c| c.is_some()).count() > 200);
    }

    #[test]
    fn masked_everywhere_drops_all_pixels() {
        let (k, dt, ds, pose) = plane_setup();
        let masks = [Mask::filled(16, 16, true)];
        let out = point_loss_3d(&k, &dt, &[PointSource { depth: &ds, target_to_source: pose }], Some(&masks), 320.0);
        assert_eq!(out.value, 0.0);
        assert!(out.choice.data().iter().all(|c| c.is_none()));
    }

    #[test]
    fn perturbed_depth_pixel_error() {
        let k = Intrinsics::new(20.0, 20.0, 7.5, 7.5).unwrap();
        let ds = DepthMap::filled(16, 16, 5.0);
        let mut dt = ds.clone();
        let delta = 0.3;
        *dt.get_mut(3, 10) += delta;
        let out = point_loss_3d(&k, &dt, &[PointSource { depth: &ds, target_to_source: Pose::identity() }], None, 320.0);
        // identity pose: P̂ = D_s(p) K⁻¹p, so pe = δ ‖K⁻¹p‖₁
        let ray = k.ray(Pixel::new(3.0, 10.0));
        let expected = delta * ray.abs().sum();
        assert!((out.pe[0].get(3, 10) - expected).abs() < 1e-12);
        assert_eq!(*out.pe[0].get(4, 10), 0.0);
    }
}
