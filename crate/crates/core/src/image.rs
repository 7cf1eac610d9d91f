//! 8-bit raster types shared by the dataset, the synthetic generator and the CLI.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ops::{self, Upsample};
use crate::tensor::{Scalar, Tensor};

/// Interleaved 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// Per-pixel class ids; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// Binary mask with values in {0, 1}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape(format!("{width}×{height} RGB image with {} bytes", data.len())));
        }
        Ok(RgbImage { width, height, data })
    }

    /// Planar `3×H×W` tensor scaled to `[0, 1]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let plane = self.width * self.height;
        Tensor::from_fn(&[3, self.height, self.width], |i| {
            let (c, p) = (i / plane, i % plane);
            T::lit(self.data[p * 3 + c] as f64 / 255.0)
        })
    }

    /// Bilinear resampling to a new size.
    pub fn resized(&self, width: usize, height: usize) -> RgbImage {
        let planar: Tensor<f32> = self.to_tensor();
        let out = ops::resize(planar.data(), (3, self.height, self.width), height, width, Upsample::Bilinear);
        let plane = width * height;
        let mut data = alloc::vec![0u8; plane * 3];
        for c in 0..3 {
            for p in 0..plane {
                let v = num_traits::Float::round(out[c * plane + p] * 255.0);
                data[p * 3 + c] = v.clamp(0.0, 255.0) as u8;
            }
        }
        RgbImage { width, height, data }
    }
}

impl LabelMap {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(format!("{width}×{height} label map with {} bytes", data.len())));
        }
        Ok(LabelMap { width, height, data })
    }

    /// Sorted distinct non-background class ids.
    pub fn classes(&self) -> Vec<u32> {
        let mut seen = [false; 256];
        self.data.iter().for_each(|&v| seen[v as usize] = true);
        (1..256).filter(|&c| seen[c]).map(|c| c as u32).collect()
    }

    /// Nearest-neighbour resampling, which never invents class ids.
    pub fn resized(&self, width: usize, height: usize) -> LabelMap {
        let ty = ops::resample_taps(self.height, height, Upsample::Nearest);
        let tx = ops::resample_taps(self.width, width, Upsample::Nearest);
        let mut data = Vec::with_capacity(width * height);
        for &(y, ..) in &ty {
            for &(x, ..) in &tx {
                data.push(self.data[y * self.width + x]);
            }
        }
        LabelMap { width, height, data }
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.height, self.width], |i| if self.data[i] != 0 { T::one() } else { T::zero() })
    }
}

/// `out[p] = 1` iff `label_map[p] == class_id`.
pub fn binarize_mask(label_map: &LabelMap, class_id: u32) -> Mask {
    Mask {
        width: label_map.width,
        height: label_map.height,
        data: label_map.data.iter().map(|&v| u8::from(v as u32 == class_id)).collect(),
    }
}
