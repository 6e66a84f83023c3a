//! Photometric reconstruction error, automasking and the minimum-reprojection
//! image losses (plain and semantically penalized).

use super::ssim::ssim;
use crate::raster::{Image, Mask, Raster};

/// `re = α/2 · (1 − SSIM) + (1 − α) · |a − b|₁`, with the L1 term channel-averaged.
pub fn recon_error(target: &Image, reconstructed: &Image, alpha: f64) -> Raster<f64> {
    let s = ssim(target, reconstructed);
    Raster::from_fn(target.width(), target.height(), |u, v| {
        let (a, b) = (target.get(u, v), reconstructed.get(u, v));
        let l1 = ((a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()) / 3.0;
        0.5 * alpha * (1.0 - s.get(u, v)) + (1.0 - alpha) * l1
    })
}

/// Mean reconstruction error over `valid`; zero when nothing is valid.
pub fn recon_loss(target: &Image, reconstructed: &Image, valid: &Mask, alpha: f64) -> f64 {
    let re = recon_error(target, reconstructed, alpha);
    masked_mean(&re, valid)
}

pub(crate) fn masked_mean(map: &Raster<f64>, valid: &Mask) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (x, &ok) in map.data().iter().zip(valid.data()) {
        if ok {
            sum += x;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// One synthesized view with its validity.
pub struct Reconstruction<'a> {
    pub image: &'a Image,
    pub valid: &'a Mask,
}

/// Per-pixel minimum over source frames of the error of the *unwarped* source.
pub fn identity_error_floor(target: &Image, sources: &[&Image], alpha: f64) -> Raster<f64> {
    let mut floor = Raster::filled(target.width(), target.height(), f64::INFINITY);
    for src in sources {
        let re = recon_error(target, src, alpha);
        for (f, e) in floor.data_mut().iter_mut().zip(re.data()) {
            *f = f.min(*e);
        }
    }
    floor
}

/// Output of the minimum-reprojection style image losses.
#[derive(Clone, Debug)]
pub struct ImageLossMaps {
    pub value: f64,
    /// `re(I_t, Î_{t'→t})` per source.
    pub re: Vec<Raster<f64>>,
    /// `re + b · M` per source (equal to `re` when no masks are given).
    pub mre: Vec<Raster<f64>>,
    /// Source index chosen at each pixel, `None` where the pixel is dropped.
    pub choice: Raster<Option<u8>>,
}

impl ImageLossMaps {
    pub fn kept(&self) -> Mask {
        self.choice.map(|c| c.is_some())
    }
}

/// `μ = [min_t' re(I_t, Î) < min_t' re(I_t, I_t')]` over valid reconstructions.
pub fn automask(target: &Image, reconstructions: &[Reconstruction<'_>], sources: &[&Image], alpha: f64) -> Mask {
    let floor = identity_error_floor(target, sources, alpha);
    let res: Vec<_> = reconstructions
        .iter()
        .map(|r| recon_error(target, r.image, alpha))
        .collect();
    Raster::from_fn(target.width(), target.height(), |u, v| {
        let best = reconstructions
            .iter()
            .zip(&res)
            .filter(|(r, _)| *r.valid.get(u, v))
            .map(|(_, re)| *re.get(u, v))
            .fold(f64::INFINITY, f64::min);
        best < *floor.get(u, v)
    })
}

/// Penalized minimum reprojection. With `masks = None` this is the plain
/// minimum reprojection loss gated by the automask.
pub fn masked_image_loss(
    target: &Image,
    reconstructions: &[Reconstruction<'_>],
    sources: &[&Image],
    masks: Option<&[Mask]>,
    penalty: f64,
    alpha: f64,
) -> ImageLossMaps {
    let floor = identity_error_floor(target, sources, alpha);
    let re: Vec<_> = reconstructions
        .iter()
        .map(|r| recon_error(target, r.image, alpha))
        .collect();
    let valid: Vec<&Mask> = reconstructions.iter().map(|r| r.valid).collect();
    let mre: Vec<Raster<f64>> = re
        .iter()
        .enumerate()
        .map(|(s, e)| match masks {
            Some(m) => Raster::from_fn(e.width(), e.height(), |u, v| {
                e.get(u, v) + if *m[s].get(u, v) { penalty } else { 0.0 }
            }),
            None => e.clone(),
        })
        .collect();
    let choice = select_min_below(&mre, &valid, |u, v| *floor.get(u, v));
    let value = mean_over_choice(&mre, &choice);
    ImageLossMaps {
        value,
        re,
        mre,
        choice,
    }
}

/// Minimum reprojection loss: automask-gated per-pixel minimum of `re`.
pub fn min_reprojection_loss(
    target: &Image,
    reconstructions: &[Reconstruction<'_>],
    sources: &[&Image],
    alpha: f64,
) -> f64 {
    masked_image_loss(target, reconstructions, sources, None, 0.0, alpha).value
}

/// Picks, per pixel, the valid candidate with the smallest value and keeps it
/// only when that value is strictly below `threshold(u, v)`.
///
/// Ties go to the lowest source index.
pub(crate) fn select_min_below(
    values: &[Raster<f64>],
    valid: &[&Mask],
    threshold: impl Fn(usize, usize) -> f64,
) -> Raster<Option<u8>> {
    let (w, h) = values[0].dims();
    Raster::from_fn(w, h, |u, v| {
        let mut best: Option<(u8, f64)> = None;
        for (s, (vals, ok)) in values.iter().zip(valid).enumerate() {
            if !*ok.get(u, v) {
                continue;
            }
            let x = *vals.get(u, v);
            if best.is_none_or(|(_, b)| x < b) {
                best = Some((s as u8, x));
            }
        }
        match best {
            Some((s, x)) if x < threshold(u, v) => Some(s),
            _ => None,
        }
    })
}

/// Mean of `values[choice(p)](p)` over pixels with a choice.
pub(crate) fn mean_over_choice(values: &[Raster<f64>], choice: &Raster<Option<u8>>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, c) in choice.data().iter().enumerate() {
        if let Some(s) = c {
            sum += values[*s as usize].data()[i];
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full(w: usize, h: usize) -> Mask {
        Mask::filled(w, h, true)
    }

    #[test]
    fn perfect_reconstruction_has_zero_error() {
        let a = Image::from_fn(8, 8, |u, v| [u as f64 / 8.0, v as f64 / 8.0, 0.5]);
        assert!(recon_error(&a, &a, 0.85).data().iter().all(|e| e.abs() < 1e-15));
        assert!(recon_loss(&a, &a, &full(8, 8), 0.85).abs() < 1e-15);
    }

    #[test]
    fn alpha_zero_is_l1() {
        let a = Image::from_fn(8, 8, |u, v| [u as f64 / 8.0, v as f64 / 8.0, 0.5]);
        let b = Image::from_fn(8, 8, |u, _| [0.3, u as f64 / 16.0, 0.1]);
        let re = recon_error(&a, &b, 0.0);
        for v in 0..8 {
            for u in 0..8 {
                let (x, y) = (a.get(u, v), b.get(u, v));
                let l1 = ((x[0] - y[0]).abs() + (x[1] - y[1]).abs() + (x[2] - y[2]).abs()) / 3.0;
                assert!((re.get(u, v) - l1).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn constant_images_closed_form() {
        let a = Image::filled(8, 8, [0.2; 3]);
        let b = Image::filled(8, 8, [0.4; 3]);
        let s = (2.0 * 0.08 + 1e-4) / (0.04 + 0.16 + 1e-4);
        let expected = 0.425 * (1.0 - s) + 0.15 * 0.2;
        assert!((expected - 0.11496f64).abs() < 1e-5);
        for e in recon_error(&a, &b, 0.85).data() {
            assert!((e - expected).abs() < 1e-12);
        }
        assert!((recon_loss(&a, &b, &full(8, 8), 0.85) - expected).abs() < 1e-12);
    }

    #[test]
    fn automask_cases() {
        let t = Image::from_fn(8, 8, |u, v| [(u * v) as f64 / 64.0, 0.5, u as f64 / 8.0]);
        let other = Image::filled(8, 8, [0.9; 3]);
        let valid = full(8, 8);
        let rec = [Reconstruction { image: &t, valid: &valid }];
        // perfect warp, moving source
        assert_eq!(automask(&t, &rec, &[&other], 0.85).count(), 64);
        // no motion: warp cannot beat zero
        assert_eq!(automask(&t, &rec, &[&t], 0.85).count(), 0);
    }

    #[test]
    fn semantic_penalty_blocks_a_source() {
        let t = Image::from_fn(8, 8, |u, v| [(u * v) as f64 / 64.0, 0.5, u as f64 / 8.0]);
        let near = Image::from_fn(8, 8, |u, v| [(u * v) as f64 / 64.0 + 0.01, 0.5, u as f64 / 8.0]);
        let far = Image::from_fn(8, 8, |u, v| [(u * v) as f64 / 64.0 + 0.05, 0.5, u as f64 / 8.0]);
        let unwarped = Image::filled(8, 8, [1.0, 0.0, 1.0]);
        let valid = full(8, 8);
        let rec = [
            Reconstruction { image: &near, valid: &valid },
            Reconstruction { image: &far, valid: &valid },
        ];
        let mut m0 = Mask::filled(8, 8, false);
        *m0.get_mut(3, 3) = true;
        let masks = [m0, Mask::filled(8, 8, false)];
        let out = masked_image_loss(&t, &rec, &[&unwarped, &unwarped], Some(&masks), 10.0, 0.85);
        assert_eq!(*out.choice.get(3, 3), Some(1));
        assert_eq!(*out.choice.get(2, 3), Some(0));
        let plain = masked_image_loss(&t, &rec, &[&unwarped, &unwarped], None, 10.0, 0.85);
        let zero_masks = [Mask::filled(8, 8, false), Mask::filled(8, 8, false)];
        let zeroed = masked_image_loss(&t, &rec, &[&unwarped, &unwarped], Some(&zero_masks), 10.0, 0.85);
        assert_eq!(plain.value, zeroed.value);
        assert_eq!(plain.value, min_reprojection_loss(&t, &rec, &[&unwarped, &unwarped], 0.85));
    }

    #[test]
    fn fully_masked_pixel_is_dropped() {
        let t = Image::filled(8, 8, [0.5; 3]);
        let rec_img = Image::filled(8, 8, [0.5; 3]);
        let unwarped = Image::filled(8, 8, [0.0; 3]);
        let valid = full(8, 8);
        let rec = [Reconstruction { image: &rec_img, valid: &valid }];
        let mut m = Mask::filled(8, 8, false);
        *m.get_mut(0, 0) = true;
        let out = masked_image_loss(&t, &rec, &[&unwarped], Some(std::slice::from_ref(&m)), 10.0, 0.85);
        assert_eq!(*out.choice.get(0, 0), None);
        assert_eq!(out.kept().count(), 63);
    }
}
