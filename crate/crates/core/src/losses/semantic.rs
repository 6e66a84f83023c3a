//! Semantic consistency between the target segmentation and segmentations
//! warped in from the source frames.

use crate::raster::{LabelMap, Mask, Raster, IGNORE_LABEL};

/// `M = [S_t ≠ Ŝ]` on valid pixels; pixels with an ignore label on either
/// side are never masked.
pub fn semantic_mask(target: &LabelMap, warped: &LabelMap, valid: &Mask) -> Mask {
    Raster::from_fn(target.width(), target.height(), |u, v| {
        let (a, b) = (*target.get(u, v), *warped.get(u, v));
        *valid.get(u, v) && a != IGNORE_LABEL && b != IGNORE_LABEL && a != b
    })
}

/// Mean over comparable pixels of `min_t' [S_t ≠ Ŝ_{t'→t}]`.
///
/// A pixel is comparable when the target label is not ignored and at least
/// one source provides a valid, non-ignored warped label.
pub fn semantic_loss(target: &LabelMap, warped: &[(&LabelMap, &Mask)]) -> f64 {
    let mut sum = 0usize;
    let mut n = 0usize;
    for v in 0..target.height() {
        for u in 0..target.width() {
            let t = *target.get(u, v);
            if t == IGNORE_LABEL {
                continue;
            }
            let mut best: Option<usize> = None;
            for (labels, valid) in warped {
                let l = *labels.get(u, v);
                if *valid.get(u, v) && l != IGNORE_LABEL {
                    let miss = usize::from(l != t);
                    best = Some(best.map_or(miss, |b| b.min(miss)));
                }
            }
            if let Some(b) = best {
                sum += b;
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum as f64 / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_labels_are_unmasked() {
        let s = LabelMap::from_fn(8, 8, |u, v| ((u + v) % 19) as u8);
        let valid = Mask::filled(8, 8, true);
        assert_eq!(semantic_mask(&s, &s, &valid).count(), 0);
        assert_eq!(semantic_loss(&s, &[(&s, &valid)]), 0.0);
    }

    #[test]
    fn single_difference_is_masked_exactly_there() {
        let s = LabelMap::filled(8, 8, 2);
        let mut w = s.clone();
        *w.get_mut(5, 1) = 13;
        let valid = Mask::filled(8, 8, true);
        let m = semantic_mask(&s, &w, &valid);
        assert_eq!(m.count(), 1);
        assert!(*m.get(5, 1));
        assert_eq!(semantic_loss(&s, &[(&w, &valid)]), 1.0 / 64.0);
    }

    #[test]
    fn invalid_pixels_are_excluded_not_masked() {
        let s = LabelMap::filled(4, 4, 2);
        let w = LabelMap::filled(4, 4, 7);
        let mut valid = Mask::filled(4, 4, true);
        *valid.get_mut(0, 0) = false;
        let m = semantic_mask(&s, &w, &valid);
        assert!(!*m.get(0, 0));
        assert_eq!(m.count(), 15);
        assert_eq!(semantic_loss(&s, &[(&w, &valid)]), 1.0);
    }

    #[test]
    fn minimum_over_sources() {
        let s = LabelMap::filled(4, 4, 2);
        let good = s.clone();
        let bad = LabelMap::filled(4, 4, 5);
        let valid = Mask::filled(4, 4, true);
        assert_eq!(semantic_loss(&s, &[(&bad, &valid), (&good, &valid)]), 0.0);
        assert_eq!(semantic_loss(&s, &[(&bad, &valid), (&bad, &valid)]), 1.0);
    }
}
