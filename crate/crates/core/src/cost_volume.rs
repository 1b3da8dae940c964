//! Constrained correlation volumes.
//!
//! For every pixel `i` of the target descriptor map the volume stores the
//! rectified cosine `max(0, target(i) . source(i + o))` for each offset `o`
//! in a `(2r+1) x (2r+1)` window. Offsets are ordered row-major by `(dy, dx)`,
//! which is also the tie-break order of every argmax in this module.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::DescriptorMap;

/// Default ceiling on score storage.
pub const DEFAULT_BUDGET_BYTES: usize = 512 << 20;

const NORM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    pub height: usize,
    pub width: usize,
    pub radius: usize,
    /// `height * width * side * side` scores, pixel-major.
    pub scores: Vec<f64>,
}

/// Search radius realized for a window ratio: round-half-up of
/// `ratio * max(h, w)`, at least 1.
pub fn window_radius(window_ratio: f64, height: usize, width: usize) -> usize {
    let r = (window_ratio * height.max(width) as f64 + 0.5).floor();
    (r as usize).max(1)
}

/// Bytes needed to hold a volume.
pub fn volume_bytes(height: usize, width: usize, radius: usize) -> Option<usize> {
    let side = 2 * radius + 1;
    height
        .checked_mul(width)?
        .checked_mul(side * side)?
        .checked_mul(std::mem::size_of::<f64>())
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += f64::from(*x) * f64::from(*y);
    }
    acc
}

/// Builds the volume with the default byte budget.
pub fn build_constrained(
    source: &DescriptorMap,
    target: &DescriptorMap,
    window_ratio: f64,
) -> Result<CostVolume> {
    build_with_budget(source, target, window_ratio, DEFAULT_BUDGET_BYTES)
}

pub fn build_with_budget(
    source: &DescriptorMap,
    target: &DescriptorMap,
    window_ratio: f64,
    budget_bytes: usize,
) -> Result<CostVolume> {
    if !source.same_shape(target) {
        return Err(Error::Shape(format!(
            "cost volume: source {}x{}x{} vs target {}x{}x{}",
            source.height, source.width, source.depth, target.height, target.width, target.depth
        )));
    }
    if !(window_ratio > 0.0 && window_ratio <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "window ratio {window_ratio} outside (0, 1]"
        )));
    }
    if !source.normalized
        || !target.normalized
        || !source.check_normalized(NORM_TOL)
        || !target.check_normalized(NORM_TOL)
    {
        return Err(Error::NotNormalized);
    }
    let radius = window_radius(window_ratio, source.height, source.width);
    build_radius(source, target, radius, budget_bytes)
}

/// Builds a volume with an explicit radius. Inputs must already be checked.
pub(crate) fn build_radius(
    source: &DescriptorMap,
    target: &DescriptorMap,
    radius: usize,
    budget_bytes: usize,
) -> Result<CostVolume> {
    let (h, w) = (source.height, source.width);
    let needed = volume_bytes(h, w, radius).ok_or(Error::BudgetExceeded {
        needed: usize::MAX,
        budget: budget_bytes,
    })?;
    if needed > budget_bytes {
        return Err(Error::BudgetExceeded {
            needed,
            budget: budget_bytes,
        });
    }
    let side = 2 * radius + 1;
    let r = radius as isize;
    let mut scores = vec![0.0; h * w * side * side];
    scores
        .par_chunks_mut(w * side * side)
        .enumerate()
        .for_each(|(y, row)| {
            for x in 0..w {
                let fi = target.pixel(x, y);
                let cell = &mut row[x * side * side..(x + 1) * side * side];
                for dy in -r..=r {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in -r..=r {
                        let sx = x as isize + dx;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let s = dot(fi, source.pixel(sx as usize, sy as usize));
                        cell[((dy + r) as usize) * side + (dx + r) as usize] = s.max(0.0);
                    }
                }
            }
        });
    Ok(CostVolume {
        height: h,
        width: w,
        radius,
        scores,
    })
}

impl CostVolume {
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn channels(&self) -> usize {
        self.side() * self.side()
    }

    /// Scores of pixel `(x, y)` over all offsets.
    #[inline]
    pub fn cell(&self, x: usize, y: usize) -> &[f64] {
        let n = self.channels();
        let o = (y * self.width + x) * n;
        &self.scores[o..o + n]
    }

    /// Score between target pixel `(x, y)` and source pixel `(x + dx, y + dy)`.
    #[inline]
    pub fn score(&self, x: usize, y: usize, dx: isize, dy: isize) -> f64 {
        let r = self.radius as isize;
        debug_assert!(dx.abs() <= r && dy.abs() <= r);
        self.cell(x, y)[((dy + r) as usize) * self.side() + (dx + r) as usize]
    }

    #[inline]
    fn in_bounds(&self, x: isize, y: isize) -> bool {
        x >= 0 && y >= 0 && x < self.width as isize && y < self.height as isize
    }

    /// In-window source pixel with the highest score for target pixel `i`.
    pub fn best_forward(&self, i: [usize; 2]) -> [usize; 2] {
        let r = self.radius as isize;
        let (x, y) = (i[0] as isize, i[1] as isize);
        let cell = self.cell(i[0], i[1]);
        let side = self.side();
        let mut best = (f64::NEG_INFINITY, i);
        for dy in -r..=r {
            for dx in -r..=r {
                let (sx, sy) = (x + dx, y + dy);
                if !self.in_bounds(sx, sy) {
                    continue;
                }
                let s = cell[((dy + r) as usize) * side + (dx + r) as usize];
                if s > best.0 {
                    best = (s, [sx as usize, sy as usize]);
                }
            }
        }
        best.1
    }

    /// Target pixel `m` with the highest score against source pixel `j`, over
    /// all `m` whose window contains `j`.
    pub fn best_backward(&self, j: [usize; 2]) -> [usize; 2] {
        let r = self.radius as isize;
        let (x, y) = (j[0] as isize, j[1] as isize);
        let mut best = (f64::NEG_INFINITY, j);
        for dy in -r..=r {
            for dx in -r..=r {
                let (mx, my) = (x - dx, y - dy);
                if !self.in_bounds(mx, my) {
                    continue;
                }
                let s = self.score(mx as usize, my as usize, dx, dy);
                if s > best.0 {
                    best = (s, [mx as usize, my as usize]);
                }
            }
        }
        best.1
    }

    /// `best_forward` for every pixel, row-major.
    pub fn forward_matches(&self) -> Vec<[usize; 2]> {
        (0..self.height)
            .into_par_iter()
            .flat_map_iter(|y| (0..self.width).map(move |x| self.best_forward([x, y])))
            .collect()
    }

    /// `best_backward` for every pixel, row-major.
    pub fn backward_matches(&self) -> Vec<[usize; 2]> {
        (0..self.height)
            .into_par_iter()
            .flat_map_iter(|y| (0..self.width).map(move |x| self.best_backward([x, y])))
            .collect()
    }

    /// Channel-first copy `(side*side) x height x width` for the regressors.
    pub fn to_channels_first(&self) -> Vec<f64> {
        let n = self.channels();
        let hw = self.height * self.width;
        let mut out = vec![0.0; n * hw];
        for p in 0..hw {
            for (k, v) in self.scores[p * n..(p + 1) * n].iter().enumerate() {
                out[k * hw + p] = *v;
            }
        }
        out
    }
}
