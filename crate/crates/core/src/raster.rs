//! Row-major rasters: RGB images, depth maps, label maps and boolean masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of semantic classes produced by the segmentation front end.
pub const NUM_CLASSES: u8 = 19;

/// Label value marking pixels without a usable class.
pub const IGNORE_LABEL: u8 = 255;

/// A dense `height × width` grid stored row by row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Raster<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

pub type Image = Raster<[f64; 3]>;
pub type DepthMap = Raster<f64>;
pub type LabelMap = Raster<u8>;
pub type Mask = Raster<bool>;

impl<T: Clone> Raster<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Raster<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "{} values do not fill a {width}x{height} raster",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds a raster by evaluating `f(u, v)` at every pixel (column `u`, row `v`).
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> &T {
        &self.data[v * self.width + u]
    }

    #[inline]
    pub fn get_mut(&mut self, u: usize, v: usize) -> &mut T {
        &mut self.data[v * self.width + u]
    }

    /// Pixel at signed coordinates, `None` outside the grid.
    #[inline]
    pub fn get_checked(&self, u: i64, v: i64) -> Option<&T> {
        if u < 0 || v < 0 || u >= self.width as i64 || v >= self.height as i64 {
            None
        } else {
            Some(&self.data[v as usize * self.width + u as usize])
        }
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn same_shape<U>(&self, other: &Raster<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Raster<U> {
        Raster {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub(crate) fn check_shape<U>(&self, other: &Raster<U>, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }
}

impl Image {
    /// Checks that every channel value lies in `[0, 1]`.
    pub fn validate_intensities(&self) -> Result<()> {
        match self
            .data
            .iter()
            .flatten()
            .find(|c| !(0.0..=1.0).contains(*c))
        {
            Some(bad) => Err(Error::Domain(format!("intensity {bad} outside [0, 1]"))),
            None => Ok(()),
        }
    }
}

impl DepthMap {
    pub fn validate_positive(&self) -> Result<()> {
        match self.data.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
            Some(bad) => Err(Error::Domain(format!("depth {bad} is not positive"))),
            None => Ok(()),
        }
    }
}

impl LabelMap {
    pub fn validate_labels(&self) -> Result<()> {
        match self
            .data
            .iter()
            .find(|&&l| l >= NUM_CLASSES && l != IGNORE_LABEL)
        {
            Some(bad) => Err(Error::Domain(format!(
                "class id {bad} outside [0, {}]",
                NUM_CLASSES - 1
            ))),
            None => Ok(()),
        }
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_fn_is_row_major() {
        let r = Raster::from_fn(3, 2, |u, v| (u, v));
        assert_eq!(r.data()[1], (1, 0));
        assert_eq!(r.data()[3], (0, 1));
        assert_eq!(*r.get(2, 1), (2, 1));
    }

    #[test]
    fn mismatched_length_is_rejected() {
        assert!(Raster::from_vec(2, 2, vec![0u8; 3]).is_err());
    }

    #[test]
    fn checked_access_outside_is_none() {
        let r = Raster::filled(2, 2, 1.0);
        assert!(r.get_checked(-1, 0).is_none());
        assert!(r.get_checked(0, 2).is_none());
        assert_eq!(r.get_checked(1, 1), Some(&1.0));
    }

    #[test]
    fn label_range() {
        let ok = LabelMap::from_vec(2, 1, vec![18, IGNORE_LABEL]).unwrap();
        assert!(ok.validate_labels().is_ok());
        let bad = LabelMap::from_vec(1, 1, vec![19]).unwrap();
        assert!(bad.validate_labels().is_err());
    }
}
