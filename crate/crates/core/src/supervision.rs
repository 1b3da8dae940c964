//! Weak supervision from forward/backward match consistency, plus a robust
//! global affine fit used to seed the coarsest level.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cost_volume::CostVolume;
use crate::error::{Error, FormatError, Result};
use crate::geometry::{Affine2D, AffineField};

/// Minimum number of samples for a usable level.
pub const SAMPLE_FLOOR: usize = 6;
pub const MSAC_ITERATIONS: usize = 500;
pub const MSAC_THRESHOLD_PX: f64 = 2.0;

/// A target pixel `i` and its consistent source match `f`, both on the
/// cost-volume grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    pub i: [usize; 2],
    pub f: [usize; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub level: u32,
    /// Grid dimensions the samples live on.
    pub height: usize,
    pub width: usize,
    /// Image pixels per grid step.
    pub stride: usize,
    pub samples: Vec<Sample>,
}

/// Image-pixel coordinate of a grid index: the centre of its stride block.
#[inline]
pub fn grid_to_pixel(g: usize, stride: usize) -> f64 {
    (stride * g) as f64 + (stride as f64 - 1.0) / 2.0
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(i, f)` in image pixels.
    pub fn pixel_pairs(&self) -> Vec<([f64; 2], [f64; 2])> {
        let s = self.stride;
        self.samples
            .iter()
            .map(|m| {
                (
                    [grid_to_pixel(m.i[0], s), grid_to_pixel(m.i[1], s)],
                    [grid_to_pixel(m.f[0], s), grid_to_pixel(m.f[1], s)],
                )
            })
            .collect()
    }

    fn with_samples(&self, samples: Vec<Sample>) -> SampleSet {
        SampleSet {
            samples,
            ..self.clone()
        }
    }

    /// Diagnostic dump: `# level k count N` then `i_x i_y f_x f_y` per line.
    pub fn to_dump(&self) -> String {
        let mut out = format!("# level {} count {}\n", self.level, self.samples.len());
        for m in &self.samples {
            out.push_str(&format!("{} {} {} {}\n", m.i[0], m.i[1], m.f[0], m.f[1]));
        }
        out
    }

    /// Parses [`SampleSet::to_dump`] output. Grid dimensions are not part of
    /// the dump and must be supplied.
    pub fn from_dump(text: &str, height: usize, width: usize, stride: usize) -> Result<SampleSet> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        let parts: Vec<&str> = header.split_whitespace().collect();
        let bad_header = || FormatError::Malformed {
            offset: 0,
            message: format!("bad sample dump header {header:?}"),
        };
        if parts.len() != 5 || parts[0] != "#" || parts[1] != "level" || parts[3] != "count" {
            return Err(bad_header().into());
        }
        let level: u32 = parts[2].parse().map_err(|_| bad_header())?;
        let count: usize = parts[4].parse().map_err(|_| bad_header())?;
        let mut samples = Vec::with_capacity(count.min(1 << 20));
        let mut offset = header.len() + 1;
        for line in lines {
            let v: Vec<usize> = line
                .split_whitespace()
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| FormatError::Malformed {
                    offset,
                    message: format!("bad sample line {line:?}"),
                })?;
            if v.len() != 4 || v[0] >= width || v[2] >= width || v[1] >= height || v[3] >= height {
                return Err(FormatError::Malformed {
                    offset,
                    message: format!("bad sample line {line:?}"),
                }
                .into());
            }
            samples.push(Sample { i: [v[0], v[1]], f: [v[2], v[3]] });
            offset += line.len() + 1;
        }
        if samples.len() != count {
            return Err(FormatError::Malformed {
                offset,
                message: format!("header says {count} samples, found {}", samples.len()),
            }
            .into());
        }
        Ok(SampleSet { level, height, width, stride, samples })
    }
}

/// Boolean object-location prior.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl ObjectMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask has {} entries, expected {height}x{width}",
                data.len()
            )));
        }
        if !data.iter().any(|&b| b) {
            return Err(Error::InvalidInput("object mask has no set pixel".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![true; height * width] }
    }

    /// Rectangle `[x0, x1) x [y0, y1)`.
    pub fn from_bbox(height: usize, width: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        let mut data = vec![false; height * width];
        for y in y0..y1.min(height) {
            for x in x0..x1.min(width) {
                data[y * width + x] = true;
            }
        }
        Self::new(height, width, data)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Block reduction to a coarser grid: a cell is set when at least half
    /// of its block is set. Falls back to "any" if that empties the mask.
    pub fn downsample(&self, stride: usize) -> Result<ObjectMask> {
        if stride == 1 {
            return Ok(self.clone());
        }
        if stride == 0 || self.height % stride != 0 || self.width % stride != 0 {
            return Err(Error::Shape(format!(
                "{}x{} mask not divisible by stride {stride}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / stride, self.width / stride);
        let counts: Vec<usize> = (0..h * w)
            .map(|c| {
                let (cx, cy) = (c % w, c / w);
                let mut n = 0;
                for dy in 0..stride {
                    for dx in 0..stride {
                        n += usize::from(self.get(cx * stride + dx, cy * stride + dy));
                    }
                }
                n
            })
            .collect();
        let half = (stride * stride).div_ceil(2);
        let major: Vec<bool> = counts.iter().map(|&n| n >= half).collect();
        if major.iter().any(|&b| b) {
            return ObjectMask::new(h, w, major);
        }
        ObjectMask::new(h, w, counts.iter().map(|&n| n > 0).collect())
    }
}

/// Consistent forward/backward matches inside the optional mask.
pub fn generate_samples(c: &CostVolume, mask: Option<&ObjectMask>, level: u32, stride: usize) -> Result<SampleSet> {
    if let Some(m) = mask {
        if m.height != c.height || m.width != c.width {
            return Err(Error::Shape(format!(
                "mask {}x{} vs volume {}x{}",
                m.height, m.width, c.height, c.width
            )));
        }
    }
    let w = c.width;
    let samples: Vec<Sample> = (0..c.height * w)
        .into_par_iter()
        .filter_map(|p| {
            let i = [p % w, p / w];
            if mask.is_some_and(|m| !m.get(i[0], i[1])) {
                return None;
            }
            let f = c.best_forward(i);
            (c.best_backward(f) == i).then_some(Sample { i, f })
        })
        .collect();
    Ok(SampleSet { level, height: c.height, width: w, stride, samples })
}

/// Keeps samples whose match lies within `radius_px` of where `field` maps
/// the sample pixel. Distances are measured in image pixels.
pub fn filter_samples_by_field(samples: &SampleSet, field: &AffineField, radius_px: f64) -> SampleSet {
    let kept = samples
        .samples
        .iter()
        .zip(samples.pixel_pairs())
        .filter(|(_, (p, q))| {
            let m = field.sample(p[0], p[1]).apply(*p);
            let d = ((m[0] - q[0]).powi(2) + (m[1] - q[1]).powi(2)).sqrt();
            d <= radius_px
        })
        .map(|(s, _)| *s)
        .collect();
    samples.with_samples(kept)
}

#[derive(Debug, Clone)]
pub struct MsacConfig {
    pub iterations: usize,
    pub inlier_threshold_px: f64,
    pub seed: u64,
}

impl Default for MsacConfig {
    fn default() -> Self {
        Self { iterations: MSAC_ITERATIONS, inlier_threshold_px: MSAC_THRESHOLD_PX, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct MsacResult {
    pub model: Affine2D,
    pub inliers: SampleSet,
    pub cost: f64,
}

impl MsacResult {
    pub fn inlier_ratio(&self, total: usize) -> f64 {
        if total == 0 {
            0.0
        } else {
            self.inliers.len() as f64 / total as f64
        }
    }
}

#[inline]
fn residual_sq(t: &Affine2D, p: [f64; 2], q: [f64; 2]) -> f64 {
    let m = t.apply(p);
    (m[0] - q[0]).powi(2) + (m[1] - q[1]).powi(2)
}

#[inline]
fn cross(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Affine through three correspondences, or `None` if the points are
/// (numerically) collinear.
pub fn affine_from_three(p: [[f64; 2]; 3], q: [[f64; 2]; 3]) -> Option<Affine2D> {
    let det = cross(p[0], p[1], p[2]);
    let scale = (p[1][0] - p[0][0]).hypot(p[1][1] - p[0][1])
        .max((p[2][0] - p[0][0]).hypot(p[2][1] - p[0][1]));
    if det.abs() <= 1e-9 * scale * scale || scale == 0.0 {
        return None;
    }
    // Solve in coordinates relative to p0: q - q0 = A (p - p0).
    let (u1, v1) = (p[1][0] - p[0][0], p[1][1] - p[0][1]);
    let (u2, v2) = (p[2][0] - p[0][0], p[2][1] - p[0][1]);
    let row = |k: usize| {
        let (b1, b2) = (q[1][k] - q[0][k], q[2][k] - q[0][k]);
        let a = (b1 * v2 - b2 * v1) / det;
        let b = (u1 * b2 - u2 * b1) / det;
        (a, b, q[0][k] - a * p[0][0] - b * p[0][1])
    };
    let (a11, a12, tx) = row(0);
    let (a21, a22, ty) = row(1);
    Some(Affine2D::new(a11, a12, tx, a21, a22, ty))
}

/// Least-squares affine fit. Errors when the points do not span the plane.
pub fn fit_affine_lsq(pairs: &[([f64; 2], [f64; 2])]) -> Result<Affine2D> {
    if pairs.len() < 3 || !spans_plane(pairs) {
        return Err(Error::Degenerate(format!(
            "{} correspondences do not span the plane",
            pairs.len()
        )));
    }
    let n = pairs.len() as f64;
    let mean = |sel: fn(&([f64; 2], [f64; 2])) -> f64| pairs.iter().map(sel).sum::<f64>() / n;
    let (px, py) = (mean(|c| c.0[0]), mean(|c| c.0[1]));
    let (qx, qy) = (mean(|c| c.1[0]), mean(|c| c.1[1]));
    let a = DMatrix::from_fn(pairs.len(), 2, |r, c| pairs[r].0[c] - if c == 0 { px } else { py });
    let bx = DVector::from_fn(pairs.len(), |r, _| pairs[r].1[0] - qx);
    let by = DVector::from_fn(pairs.len(), |r, _| pairs[r].1[1] - qy);
    let svd = a.svd(true, true);
    let sx = svd.solve(&bx, 1e-12).map_err(|e| Error::Degenerate(e.into()))?;
    let sy = svd.solve(&by, 1e-12).map_err(|e| Error::Degenerate(e.into()))?;
    let (a11, a12, a21, a22) = (sx[0], sx[1], sy[0], sy[1]);
    Ok(Affine2D::new(
        a11,
        a12,
        qx - a11 * px - a12 * py,
        a21,
        a22,
        qy - a21 * px - a22 * py,
    ))
}

fn spans_plane(pairs: &[([f64; 2], [f64; 2])]) -> bool {
    let Some(&(a, _)) = pairs.first() else { return false };
    let far = pairs
        .iter()
        .map(|c| c.0)
        .max_by(|x, y| {
            let dx = (x[0] - a[0]).hypot(x[1] - a[1]);
            let dy = (y[0] - a[0]).hypot(y[1] - a[1]);
            dx.total_cmp(&dy)
        })
        .unwrap_or(a);
    let len2 = (far[0] - a[0]).powi(2) + (far[1] - a[1]).powi(2);
    if len2 == 0.0 {
        return false;
    }
    pairs.iter().any(|c| cross(a, far, c.0).abs() > 1e-9 * len2)
}

/// MSAC over point pairs in image pixels. Returns the model and the indices
/// of its inliers.
pub fn msac_pairs(pairs: &[([f64; 2], [f64; 2])], cfg: &MsacConfig) -> Result<(Affine2D, Vec<usize>, f64)> {
    if pairs.len() < 3 || !spans_plane(pairs) {
        return Err(Error::Degenerate(format!(
            "msac needs 3 non-collinear correspondences, got {}",
            pairs.len()
        )));
    }
    let th2 = cfg.inlier_threshold_px * cfg.inlier_threshold_px;
    let cost_of = |t: &Affine2D| -> f64 {
        pairs.iter().map(|(p, q)| residual_sq(t, *p, *q).min(th2)).sum()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = pairs.len();
    let mut best: Option<(f64, Affine2D)> = None;
    for _ in 0..cfg.iterations {
        let a = rng.gen_range(0..n);
        let mut b = rng.gen_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        let mut c = rng.gen_range(0..n - 2);
        for taken in [a.min(b), a.max(b)] {
            if c >= taken {
                c += 1;
            }
        }
        let Some(t) = affine_from_three(
            [pairs[a].0, pairs[b].0, pairs[c].0],
            [pairs[a].1, pairs[b].1, pairs[c].1],
        ) else {
            continue;
        };
        let cost = cost_of(&t);
        if best.as_ref().is_none_or(|(bc, _)| cost < *bc) {
            best = Some((cost, t));
        }
    }
    // Every draw collinear: fall back to the global least-squares fit.
    let hypothesis = match best {
        Some((_, t)) => t,
        None => fit_affine_lsq(pairs)?,
    };
    let inliers_of = |t: &Affine2D| -> Vec<usize> {
        (0..n).filter(|&k| residual_sq(t, pairs[k].0, pairs[k].1) <= th2).collect()
    };
    let mut model = hypothesis;
    let idx = inliers_of(&hypothesis);
    let subset: Vec<_> = idx.iter().map(|&k| pairs[k]).collect();
    if let Ok(refit) = fit_affine_lsq(&subset) {
        if cost_of(&refit) <= cost_of(&hypothesis) {
            model = refit;
        }
    }
    let inliers = inliers_of(&model);
    let cost = cost_of(&model);
    Ok((model, inliers, cost))
}

/// MSAC global affine over a sample set (residuals in image pixels).
pub fn msac_affine(samples: &SampleSet, cfg: &MsacConfig) -> Result<MsacResult> {
    let pairs = samples.pixel_pairs();
    let (model, idx, cost) = msac_pairs(&pairs, cfg)?;
    let inliers = samples.with_samples(idx.iter().map(|&k| samples.samples[k]).collect());
    Ok(MsacResult { model, inliers, cost })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(samples: Vec<Sample>, h: usize, w: usize) -> SampleSet {
        SampleSet { level: 1, height: h, width: w, stride: 1, samples }
    }

    /// Hand-built 3x3 volume with radius 1 where every score is zero except
    /// the listed `(target pixel, source pixel, score)` triples.
    fn volume(entries: &[([usize; 2], [usize; 2], f64)]) -> CostVolume {
        let mut c = CostVolume { height: 3, width: 3, radius: 1, scores: vec![0.0; 81] };
        for &(i, j, s) in entries {
            let dx = j[0] as isize - i[0] as isize;
            let dy = j[1] as isize - i[1] as isize;
            let idx = (i[1] * 3 + i[0]) * 9 + ((dy + 1) * 3 + dx + 1) as usize;
            c.scores[idx] = s;
        }
        c
    }

    #[test]
    fn asymmetric_match_excluded() {
        // p=(0,0) and q=(2,0)... both prefer r=(1,0); r's best backward is p.
        let p = [0, 1];
        let q = [2, 1];
        let r = [1, 1];
        let c = volume(&[(p, r, 0.9), (q, r, 0.8)]);
        assert_eq!(c.best_forward(p), r);
        assert_eq!(c.best_forward(q), r);
        assert_eq!(c.best_backward(r), p);
        let s = generate_samples(&c, None, 1, 1).unwrap();
        assert!(s.samples.contains(&Sample { i: p, f: r }));
        assert!(!s.samples.iter().any(|m| m.i == q));
    }

    #[test]
    fn left_half_mask() {
        let mut data = vec![false; 9];
        for y in 0..3 {
            data[y * 3] = true;
        }
        let mask = ObjectMask::new(3, 3, data).unwrap();
        let mut scores = vec![0.0; 81];
        for p in 0..9 {
            scores[p * 9 + 4] = 1.0;
        }
        let c = CostVolume { height: 3, width: 3, radius: 1, scores };
        let s = generate_samples(&c, Some(&mask), 1, 1).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.samples.iter().all(|m| m.i[0] == 0 && m.f == m.i));
        let full = generate_samples(&c, None, 1, 1).unwrap();
        assert_eq!(full.len(), 9);
        assert!(generate_samples(&c, Some(&ObjectMask::full(2, 3)), 1, 1).is_err());
    }

    #[test]
    fn mask_helpers() {
        let m = ObjectMask::from_bbox(4, 4, 1, 1, 3, 3).unwrap();
        assert_eq!(m.count(), 4);
        assert!(m.get(1, 1) && !m.get(0, 0));
        assert!(ObjectMask::new(2, 2, vec![false; 4]).is_err());
        let d = m.downsample(2).unwrap();
        // Each 2x2 block holds one set pixel: majority fails, "any" fallback.
        assert_eq!(d.data, vec![true; 4]);
        let big = ObjectMask::from_bbox(4, 4, 0, 0, 2, 2).unwrap().downsample(2).unwrap();
        assert_eq!(big.data, vec![true, false, false, false]);
    }

    #[test]
    fn exact_translation_recovered() {
        let mut pairs = Vec::new();
        let t = Affine2D::translation(5.0, -3.0);
        for k in 0..30 {
            let p = [(k % 6) as f64 * 3.0, (k / 6) as f64 * 2.5 + 1.0];
            pairs.push((p, t.apply(p)));
        }
        let (m, inl, _) = msac_pairs(&pairs, &MsacConfig::default()).unwrap();
        assert!(m.max_abs_diff(&t) < 1e-9, "{m:?}");
        assert_eq!(inl.len(), 30);
    }

    #[test]
    fn three_point_solve() {
        let t = Affine2D::new(1.2, -0.3, 4.0, 0.1, 0.9, -2.0);
        let p = [[0.0, 0.0], [10.0, 1.0], [3.0, 7.0]];
        let q = p.map(|v| t.apply(v));
        let s = affine_from_three(p, q).unwrap();
        assert!(s.max_abs_diff(&t) < 1e-12);
        assert!(affine_from_three([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]], q).is_none());
        let (m, inl, _) = msac_pairs(&p.iter().zip(q).map(|(a, b)| (*a, b)).collect::<Vec<_>>(), &MsacConfig::default()).unwrap();
        assert!(m.max_abs_diff(&t) < 1e-9);
        assert_eq!(inl.len(), 3);
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let line: Vec<_> = (0..10).map(|k| ([k as f64, 2.0 * k as f64], [0.0, 0.0])).collect();
        assert!(matches!(msac_pairs(&line, &MsacConfig::default()), Err(Error::Degenerate(_))));
        assert!(matches!(msac_pairs(&line[..2], &MsacConfig::default()), Err(Error::Degenerate(_))));
        assert!(matches!(fit_affine_lsq(&line), Err(Error::Degenerate(_))));
    }

    #[test]
    fn inliers_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Affine2D::new(0.95, 0.2, 6.0, -0.15, 1.05, -4.0);
        let mut pairs = Vec::new();
        for k in 0..200 {
            let p = [rng.gen_range(0.0..128.0), rng.gen_range(0.0..128.0)];
            let q = if k % 5 == 0 {
                [rng.gen_range(0.0..128.0), rng.gen_range(0.0..128.0)]
            } else {
                t.apply(p)
            };
            pairs.push((p, q));
        }
        let (m, inl, _) = msac_pairs(&pairs, &MsacConfig::default()).unwrap();
        assert!(m.max_abs_diff(&t) < 1e-6);
        assert!(inl.iter().all(|k| k % 5 != 0 || residual_sq(&t, pairs[*k].0, pairs[*k].1) <= 4.0));
        assert!(inl.len() >= 160);
    }

    #[test]
    fn filter_by_field() {
        let s = set(
            vec![
                Sample { i: [1, 1], f: [3, 1] },
                Sample { i: [2, 2], f: [4, 2] },
                Sample { i: [0, 3], f: [0, 3] },
            ],
            4,
            6,
        );
        let field = AffineField::constant(4, 6, Affine2D::translation(2.0, 0.0));
        let kept = filter_samples_by_field(&s, &field, 0.0);
        assert_eq!(kept.samples, s.samples[..2].to_vec());
        assert_eq!(filter_samples_by_field(&s, &field, 2.0).samples, s.samples);
        assert_eq!(filter_samples_by_field(&s, &field, 1.9).len(), 2);
    }

    #[test]
    fn dump_roundtrip() {
        let s = set(vec![Sample { i: [1, 2], f: [3, 0] }, Sample { i: [0, 0], f: [0, 1] }], 4, 4);
        let text = s.to_dump();
        assert!(text.starts_with("# level 1 count 2\n1 2 3 0\n"));
        assert_eq!(SampleSet::from_dump(&text, 4, 4, 1).unwrap(), s);
        assert!(SampleSet::from_dump("# level 1 count 3\n1 2 3 0\n", 4, 4, 1).is_err());
        assert!(SampleSet::from_dump("level 1\n", 4, 4, 1).is_err());
    }

    #[test]
    fn pixel_coordinates_use_block_centres() {
        assert_eq!(grid_to_pixel(0, 1), 0.0);
        assert_eq!(grid_to_pixel(0, 2), 0.5);
        assert_eq!(grid_to_pixel(3, 2), 6.5);
        assert_eq!(grid_to_pixel(1, 4), 5.5);
    }
}
