//! Dense tensor containers, the seeded generator, and GIPL file I/O.

mod io;
mod rng;

pub use io::{
    read_tensor, read_tensor_from, read_tensor_set, write_csv, write_tensor, write_tensor_set, write_tensor_to,
    GIPL_HEADER_LEN, GIPL_MAGIC, GIPL_VERSION,
};
pub use rng::Rng;

use crate::error::{Error, Result};

/// Label value skipped by evaluation.
pub const IGNORE_LABEL: u32 = 255;

/// A `channels × height × width` grid of finite `f64` values, channel-major,
/// row-major within a channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, fill: f64) -> Result<Self> {
        check_dims(channels, height, width)?;
        if !fill.is_finite() {
            return Err(Error::NonFinite { index: 0, value: fill });
        }
        Ok(Self {
            channels,
            height,
            width,
            data: vec![fill; channels * height * width],
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(channels, height, width, 0.0)
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(channels, height, width)?;
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                shape: vec![channels, height, width],
                expected,
                actual: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { index, value });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Builds a map by evaluating `f(channel, y, x)` at every cell.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        check_dims(channels, height, width)?;
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::from_vec(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    /// Contiguous slab holding one channel.
    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    /// Extracts channel `c` as a single-channel map.
    pub fn channel_map(&self, c: usize) -> FeatureMap {
        FeatureMap {
            channels: 1,
            height: self.height,
            width: self.width,
            data: self.channel(c).to_vec(),
        }
    }

    /// Returns a copy with `f` applied to every element.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<FeatureMap> {
        Self::from_vec(
            self.channels,
            self.height,
            self.width,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

fn check_dims(channels: usize, height: usize, width: usize) -> Result<()> {
    if channels == 0 || height == 0 || width == 0 {
        return Err(Error::ZeroDimension(vec![channels, height, width]));
    }
    Ok(())
}

/// A `height × width` grid of integer class ids.
///
/// Every label is below `num_classes`, except [`IGNORE_LABEL`] which marks
/// pixels that evaluation skips.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    height: usize,
    width: usize,
    num_classes: usize,
    labels: Vec<u32>,
}

impl LabelGrid {
    pub fn new(height: usize, width: usize, num_classes: usize, labels: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 || num_classes == 0 {
            return Err(Error::ZeroDimension(vec![height, width, num_classes]));
        }
        if labels.len() != height * width {
            return Err(Error::LengthMismatch {
                shape: vec![height, width],
                expected: height * width,
                actual: labels.len(),
            });
        }
        if let Some((index, &label)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= num_classes && l != IGNORE_LABEL)
        {
            return Err(Error::LabelOutOfRange {
                index,
                label,
                num_classes,
            });
        }
        Ok(Self {
            height,
            width,
            num_classes,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, num_classes: usize, label: u32) -> Result<Self> {
        Self::new(height, width, num_classes, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Labels as a single-channel map of exact integer values.
    pub fn to_feature_map(&self) -> FeatureMap {
        FeatureMap {
            channels: 1,
            height: self.height,
            width: self.width,
            data: self.labels.iter().map(|&l| f64::from(l)).collect(),
        }
    }

    /// Inverse of [`LabelGrid::to_feature_map`]; every value must be an exact
    /// non-negative integer.
    pub fn from_feature_map(map: &FeatureMap, num_classes: usize) -> Result<Self> {
        if map.channels() != 1 {
            return Err(Error::GeometryMismatch(format!(
                "label map must have 1 channel, found {}",
                map.channels()
            )));
        }
        let mut labels = Vec::with_capacity(map.len());
        for (index, &v) in map.data().iter().enumerate() {
            if v < 0.0 || v.fract() != 0.0 || v > f64::from(u32::MAX) {
                return Err(Error::InvalidArgument(format!(
                    "label value {v} at flat index {index} is not a class id"
                )));
            }
            labels.push(v as u32);
        }
        Self::new(map.height(), map.width(), num_classes, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_constructor() {
        let m = FeatureMap::new(1, 2, 2, 0.0).unwrap();
        assert_eq!(m.data(), &[0.0; 4]);
        let m = FeatureMap::new(3, 4, 4, 1.5).unwrap();
        assert_eq!(m.len(), 48);
        assert!(m.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn zero_dimension_rejected() {
        let err = FeatureMap::new(1, 0, 2, 0.0).unwrap_err();
        assert!(err.to_string().contains("zero dimension"), "{err}");
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(
            FeatureMap::from_vec(1, 1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1, .. })
        ));
        assert!(FeatureMap::new(1, 1, 1, f64::INFINITY).is_err());
    }

    #[test]
    fn length_checked() {
        assert!(matches!(
            FeatureMap::from_vec(2, 2, 2, vec![0.0; 7]),
            Err(Error::LengthMismatch {
                expected: 8,
                actual: 7,
                ..
            })
        ));
    }

    #[test]
    fn channel_major_indexing() {
        let m = FeatureMap::from_fn(2, 2, 3, |c, y, x| (c * 100 + y * 10 + x) as f64).unwrap();
        assert_eq!(m.get(1, 1, 2), 112.0);
        assert_eq!(m.data()[m.index(1, 0, 1)], 101.0);
        assert_eq!(m.channel(1), &[100.0, 101.0, 102.0, 110.0, 111.0, 112.0]);
    }

    #[test]
    fn labels_validated() {
        assert!(LabelGrid::new(1, 2, 3, vec![0, 2]).is_ok());
        assert!(matches!(
            LabelGrid::new(1, 2, 3, vec![0, 3]),
            Err(Error::LabelOutOfRange { label: 3, .. })
        ));
        assert!(LabelGrid::new(1, 2, 3, vec![0, IGNORE_LABEL]).is_ok());
    }

    #[test]
    fn labels_through_feature_map() {
        let grid = LabelGrid::new(2, 2, 4, vec![0, 1, 2, 3]).unwrap();
        let back = LabelGrid::from_feature_map(&grid.to_feature_map(), 4).unwrap();
        assert_eq!(grid, back);
        let bad = FeatureMap::from_vec(1, 1, 1, vec![1.5]).unwrap();
        assert!(LabelGrid::from_feature_map(&bad, 4).is_err());
    }
}
