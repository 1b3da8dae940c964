//! Dense intensity images stored as interleaved `f64` samples in `[0, 1]`.

use crate::error::{Error, Result};

/// An `height x width x channels` intensity map, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidInput("image needs at least one channel".into()));
        }
        let expected = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Error::Shape("image dimensions overflow".into()))?;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "image data has {} values, expected {expected}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            height,
            width,
            channels: 1,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Bilinear sample at a real-valued location; neighbours outside the
    /// image contribute zero.
    #[inline]
    pub fn sample_bilinear(&self, x: f64, y: f64, c: usize) -> f64 {
        if !(x.is_finite() && y.is_finite()) {
            return 0.0;
        }
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let x0 = x0 as i64;
        let y0 = y0 as i64;
        let w = self.width as i64;
        let h = self.height as i64;
        let fetch = |xi: i64, yi: i64| -> f64 {
            if xi < 0 || yi < 0 || xi >= w || yi >= h {
                0.0
            } else {
                self.get(xi as usize, yi as usize, c)
            }
        };
        let w00 = (1.0 - fx) * (1.0 - fy);
        let w10 = fx * (1.0 - fy);
        let w01 = (1.0 - fx) * fy;
        let w11 = fx * fy;
        let mut v = w00 * fetch(x0, y0);
        if w10 != 0.0 {
            v += w10 * fetch(x0 + 1, y0);
        }
        if w01 != 0.0 {
            v += w01 * fetch(x0, y0 + 1);
        }
        if w11 != 0.0 {
            v += w11 * fetch(x0 + 1, y0 + 1);
        }
        v
    }

    /// Single-channel luma (ITU-R BT.601 weights for RGB input).
    pub fn to_luma(&self) -> Image {
        match self.channels {
            1 => self.clone(),
            3 => {
                let data = self
                    .data
                    .chunks_exact(3)
                    .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                    .collect();
                Image {
                    height: self.height,
                    width: self.width,
                    channels: 1,
                    data,
                }
            }
            c => {
                let data = self
                    .data
                    .chunks_exact(c)
                    .map(|p| p.iter().sum::<f64>() / c as f64)
                    .collect();
                Image {
                    height: self.height,
                    width: self.width,
                    channels: 1,
                    data,
                }
            }
        }
    }

    /// Box-average downsampling by an integer factor. Dimensions must divide.
    pub fn downsample(&self, factor: usize) -> Result<Image> {
        if factor == 0 {
            return Err(Error::InvalidInput("downsample factor must be >= 1".into()));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        if self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::Shape(format!(
                "{}x{} image not divisible by stride {factor}",
                self.height, self.width
            )));
        }
        let (h, w, ch) = (self.height / factor, self.width / factor, self.channels);
        let norm = 1.0 / (factor * factor) as f64;
        let mut out = Image::zeros(h, w, ch);
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    let mut acc = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += self.get(x * factor + dx, y * factor + dy, c);
                        }
                    }
                    out.set(x, y, c, acc * norm);
                }
            }
        }
        Ok(out)
    }

    /// Horizontal mirror.
    pub fn flip_horizontal(&self) -> Image {
        let mut out = Image::zeros(self.height, self.width, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(self.width - 1 - x, y, c, self.get(x, y, c));
                }
            }
        }
        out
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}
