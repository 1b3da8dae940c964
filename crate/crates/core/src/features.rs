//! Dense handcrafted descriptors.
//!
//! Each pixel gets an 8-bin oriented-gradient histogram, Gaussian-pooled at
//! one or more scales. Pooling at scale index `s` uses `sigma = 2^s` pixels.
//! Per-scale blocks are normalized, concatenated in `scale_indices` order and
//! the whole vector is L2-normalized so that dot products are cosines.
//! The vector is then mean-centred and normalized again: raw histograms are
//! non-negative, so without centring every pair of textured pixels has a
//! large positive cosine and the rectified cost volume is nearly flat.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::image::Image;

pub const ORIENTATIONS: usize = 8;
pub const MIN_SIDE: usize = 16;
const BASE_SIGMA: f64 = 1.0;

/// Gaussian pooling sigma (pixels) for a scale index.
pub fn pooling_sigma(scale_index: u32) -> f64 {
    BASE_SIGMA * f64::from(1u32 << scale_index)
}

/// Truncation radius of the pooling kernel at a scale index.
pub fn pooling_radius(scale_index: u32) -> usize {
    (3.0 * pooling_sigma(scale_index)).ceil() as usize
}

/// Dense `height x width x depth` descriptors, channel-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorMap {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub data: Vec<f32>,
    pub normalized: bool,
}

impl DescriptorMap {
    pub fn new(height: usize, width: usize, depth: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * depth {
            return Err(Error::Shape(format!(
                "descriptor data has {} values, expected {height}x{width}x{depth}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            depth,
            data,
            normalized: false,
        })
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let o = (y * self.width + x) * self.depth;
        &self.data[o..o + self.depth]
    }

    pub fn same_shape(&self, other: &DescriptorMap) -> bool {
        self.height == other.height && self.width == other.width && self.depth == other.depth
    }

    /// Checks every pixel vector is either zero or unit length within `tol`.
    pub fn check_normalized(&self, tol: f64) -> bool {
        self.data.chunks_exact(self.depth.max(1)).all(|v| {
            let n = norm(v);
            n == 0.0 || (n - 1.0).abs() <= tol
        })
    }
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&a| f64::from(a) * f64::from(a)).sum::<f64>().sqrt()
}

/// Which pooling scales a pyramid level samples, and its search-window ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSpec {
    pub level: u32,
    pub scale_indices: Vec<u32>,
    pub window_ratio: f64,
}

impl LevelSpec {
    pub fn new(level: u32, scale_indices: Vec<u32>, window_ratio: f64) -> Result<Self> {
        let spec = Self {
            level,
            scale_indices,
            window_ratio,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale_indices.is_empty() {
            return Err(Error::InvalidInput("level spec has no scale indices".into()));
        }
        if self.scale_indices.iter().any(|&s| s > 8) {
            return Err(Error::InvalidInput("scale index above 8".into()));
        }
        if !(self.window_ratio > 0.0 && self.window_ratio <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "window ratio {} outside (0, 1]",
                self.window_ratio
            )));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        ORIENTATIONS * self.scale_indices.len()
    }
}

/// Per-pixel orientation histograms (soft-binned gradient magnitude), one
/// plane per orientation.
fn orientation_planes(gray: &Image) -> Vec<Vec<f64>> {
    let (h, w) = (gray.height, gray.width);
    let at = |x: isize, y: isize| -> f64 {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        gray.get(xc, yc, 0)
    };
    let mut planes = vec![vec![0.0; h * w]; ORIENTATIONS];
    let bin_width = 2.0 * PI / ORIENTATIONS as f64;
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            let gx = 0.5 * (at(xi + 1, yi) - at(xi - 1, yi));
            let gy = 0.5 * (at(xi, yi + 1) - at(xi, yi - 1));
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let mut theta = gy.atan2(gx);
            if theta < 0.0 {
                theta += 2.0 * PI;
            }
            let pos = theta / bin_width;
            let lo = pos.floor();
            let frac = pos - lo;
            let b0 = (lo as usize) % ORIENTATIONS;
            let b1 = (b0 + 1) % ORIENTATIONS;
            planes[b0][y * w + x] += mag * (1.0 - frac);
            planes[b1][y * w + x] += mag * frac;
        }
    }
    planes
}

pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub(crate) fn blur(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let xs = (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * row[xs];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let ys = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[ys * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn normalize_in_place(v: &mut [f64]) {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|a| *a /= n);
    }
}

/// Multi-scale oriented-gradient descriptors for every pixel of `img`.
pub fn extract_handcrafted(img: &Image, spec: &LevelSpec) -> Result<DescriptorMap> {
    spec.validate()?;
    if img.height.min(img.width) < MIN_SIDE {
        return Err(Error::ImageTooSmall {
            height: img.height,
            width: img.width,
            min: MIN_SIDE,
        });
    }
    let gray = img.to_luma();
    let (h, w) = (gray.height, gray.width);
    let planes = orientation_planes(&gray);
    let pooled: Vec<Vec<Vec<f64>>> = spec
        .scale_indices
        .iter()
        .map(|&s| {
            let kernel = gaussian_kernel(pooling_sigma(s));
            planes.iter().map(|p| blur(p, h, w, &kernel)).collect()
        })
        .collect();
    let depth = spec.depth();
    let mut data = Vec::with_capacity(h * w * depth);
    let mut v = vec![0.0; depth];
    for px in 0..h * w {
        for (si, scale) in pooled.iter().enumerate() {
            let block = &mut v[si * ORIENTATIONS..(si + 1) * ORIENTATIONS];
            for (b, plane) in scale.iter().enumerate() {
                block[b] = plane[px];
            }
            normalize_in_place(block);
        }
        normalize_in_place(&mut v);
        let mean = v.iter().sum::<f64>() / depth as f64;
        v.iter_mut().for_each(|a| *a -= mean);
        normalize_in_place(&mut v);
        data.extend(v.iter().map(|&a| a as f32));
    }
    Ok(DescriptorMap {
        height: h,
        width: w,
        depth,
        data,
        normalized: true,
    })
}

/// Channel-wise concatenation in list order. No re-normalization.
pub fn concat_levels(maps: &[DescriptorMap]) -> Result<DescriptorMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidInput("concat_levels needs at least one map".into()))?;
    if maps
        .iter()
        .any(|m| m.height != first.height || m.width != first.width)
    {
        return Err(Error::Shape("concat_levels: spatial size mismatch".into()));
    }
    if maps.len() == 1 {
        return Ok(first.clone());
    }
    let depth: usize = maps.iter().map(|m| m.depth).sum();
    let n = first.height * first.width;
    let mut data = Vec::with_capacity(n * depth);
    for px in 0..n {
        for m in maps {
            data.extend_from_slice(&m.data[px * m.depth..(px + 1) * m.depth]);
        }
    }
    Ok(DescriptorMap {
        height: first.height,
        width: first.width,
        depth,
        data,
        normalized: false,
    })
}

/// Scales each pixel vector to unit length; zero vectors stay zero.
pub fn l2_normalize(map: &DescriptorMap) -> DescriptorMap {
    let mut out = map.clone();
    if map.depth > 0 {
        for v in out.data.chunks_exact_mut(map.depth) {
            let n = norm(v);
            if n > 0.0 {
                v.iter_mut().for_each(|a| *a = (f64::from(*a) / n) as f32);
            }
        }
    }
    out.normalized = true;
    out
}
