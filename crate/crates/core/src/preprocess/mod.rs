//! Feature preparation: z-scores, dense optical flow, flow colouring and
//! stereo disparity, plus the binary cache for prepared windows.

mod cache;
mod color;
mod disparity;
mod flow;
mod normalize;

pub use cache::{read_window_cache, write_window_cache, CACHE_MAGIC};
pub use color::flow_to_rgb;
pub use disparity::{sgbm_disparity, DisparityMap, SgbmParams};
pub use flow::{farneback_flow, FarnebackParams, FlowField};
pub use normalize::{zscore_normalize, ColumnScaler, ZScore};

use crate::error::{Error, Result};

/// Single-channel floating point image in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height || width == 0 || height == 0 {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height} image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let data = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self {
            width,
            height,
            data,
        }
    }

    /// Luma of interleaved RGB8 pixels.
    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{} bytes for a {width}x{height} RGB image",
                rgb.len()
            )));
        }
        let data = rgb
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    fn same_size(&self, other: &GrayImage) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::Shape(format!(
                "image sizes differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

/// Averages `factor x factor` blocks of a channels-last image.
pub fn block_average(data: &[f64], size: usize, channels: usize, factor: usize) -> Vec<f64> {
    if factor == 1 {
        return data.to_vec();
    }
    let out = size / factor;
    let norm = (factor * factor) as f64;
    let mut res = vec![0.0; out * out * channels];
    for y in 0..out * factor {
        for x in 0..out * factor {
            let dst = ((y / factor) * out + x / factor) * channels;
            let src = (y * size + x) * channels;
            for c in 0..channels {
                res[dst + c] += data[src + c] / norm;
            }
        }
    }
    res
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn luma_and_block_average() {
        let img = GrayImage::from_rgb8(1, 1, &[255, 255, 255]).unwrap();
        assert!((img.data[0] - 255.0).abs() < 1e-9);
        let data: Vec<f64> = (0..16).map(f64::from).collect();
        assert_eq!(block_average(&data, 4, 1, 2), vec![2.5, 4.5, 10.5, 12.5]);
        assert!(GrayImage::new(2, 2, vec![0.0; 3]).is_err());
    }
}
