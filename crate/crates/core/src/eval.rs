//! Matching-accuracy metrics.

use crate::error::{Error, Result};
use crate::geometry::{AffineField, FlowField};
use crate::supervision::ObjectMask;
use crate::synth::warp_mask;

/// Longer image side used by the endpoint-accuracy protocol.
pub const EVAL_MAX_SIDE: usize = 100;
/// Default endpoint threshold in pixels.
pub const DEFAULT_THRESHOLD: f64 = 5.0;
/// Default PCK radii as fractions of the longer bounding-box side.
pub const DEFAULT_ALPHAS: [f64; 3] = [0.05, 0.1, 0.15];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowAccuracyReport {
    pub threshold: f64,
    /// Fraction of evaluated pixels with endpoint error below the threshold.
    pub fraction: f64,
    pub count: usize,
}

/// Keypoints in pixels with the bounding box `(h, w)` that sets PCK radii.
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoints {
    pub points: Vec<[f64; 2]>,
    pub bbox: (f64, f64),
}

impl Keypoints {
    /// Text form: a `# bbox h w` line followed by one `x y` per line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut bbox = None;
        let mut points = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = || Error::InvalidInput(format!("keypoint line {}: {line:?}", n + 1));
            if let Some(rest) = line.strip_prefix('#') {
                let f: Vec<&str> = rest.split_whitespace().collect();
                if f.first() == Some(&"bbox") {
                    if f.len() != 3 {
                        return Err(bad());
                    }
                    bbox = Some((f[1].parse().map_err(|_| bad())?, f[2].parse().map_err(|_| bad())?));
                }
                continue;
            }
            let v: Vec<f64> = line.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
            if v.len() != 2 {
                return Err(bad());
            }
            points.push([v[0], v[1]]);
        }
        let bbox = bbox.ok_or_else(|| Error::InvalidInput("keypoint file lacks a '# bbox h w' line".into()))?;
        Ok(Self { points, bbox })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# bbox {} {}\n", self.bbox.0, self.bbox.1);
        for p in &self.points {
            out.push_str(&format!("{} {}\n", p[0], p[1]));
        }
        out
    }

    /// Rejects points outside an `height x width` image.
    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        for p in &self.points {
            if !(p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= width as f64 - 1.0 && p[1] <= height as f64 - 1.0) {
                return Err(Error::InvalidInput(format!("keypoint ({}, {}) outside {height}x{width}", p[0], p[1])));
            }
        }
        Ok(())
    }
}

/// Size after scaling the longer side to `max_side`.
fn resized_dims(height: usize, width: usize, max_side: usize) -> (usize, usize, f64, f64) {
    let s = max_side as f64 / height.max(width) as f64;
    let nh = ((height as f64 * s).round() as usize).max(1);
    let nw = ((width as f64 * s).round() as usize).max(1);
    (nh, nw, nh as f64 / height as f64, nw as f64 / width as f64)
}

#[inline]
fn source_coord(x: usize, scale: f64) -> f64 {
    (x as f64 + 0.5) / scale - 0.5
}

/// Bilinear resize of a flow with vectors multiplied by the axis scales.
pub fn resize_flow(flow: &FlowField, max_side: usize) -> FlowField {
    let (nh, nw, sy, sx) = resized_dims(flow.height, flow.width, max_side);
    let mut data = Vec::with_capacity(nh * nw);
    for y in 0..nh {
        for x in 0..nw {
            let v = flow.sample(source_coord(x, sx), source_coord(y, sy));
            data.push([v[0] * sx, v[1] * sy]);
        }
    }
    FlowField { height: nh, width: nw, data }
}

/// Bilinear resize of a mask, thresholded at one half.
pub fn resize_mask(mask: &ObjectMask, max_side: usize) -> Vec<bool> {
    let (nh, nw, sy, sx) = resized_dims(mask.height, mask.width, max_side);
    let plane: Vec<[f64; 2]> = mask.data.iter().map(|&b| [if b { 1.0 } else { 0.0 }, 0.0]).collect();
    let f = FlowField { height: mask.height, width: mask.width, data: plane };
    let mut out = Vec::with_capacity(nh * nw);
    for y in 0..nh {
        for x in 0..nw {
            out.push(f.sample(source_coord(x, sx), source_coord(y, sy))[0] >= 0.5);
        }
    }
    out
}

fn endpoint_errors(flow: &FlowField, gt: &FlowField, mask: &[bool]) -> Vec<f64> {
    flow.data
        .iter()
        .zip(&gt.data)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((a, b), _)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
        .collect()
}

fn check_dims(flow: &FlowField, gt: &FlowField, mask: &ObjectMask) -> Result<()> {
    if flow.height != gt.height || flow.width != gt.width || mask.height != gt.height || mask.width != gt.width {
        return Err(Error::Shape(format!(
            "flow {}x{}, ground truth {}x{}, mask {}x{}",
            flow.height, flow.width, gt.height, gt.width, mask.height, mask.width
        )));
    }
    if mask.count() == 0 {
        return Err(Error::InvalidInput("evaluation mask is empty".into()));
    }
    Ok(())
}

/// Fraction of foreground pixels with endpoint error strictly below each
/// threshold, measured after resizing so the longer side is 100 pixels.
pub fn endpoint_accuracy_sweep(flow: &FlowField, gt: &FlowField, mask: &ObjectMask, thresholds: &[f64]) -> Result<Vec<FlowAccuracyReport>> {
    check_dims(flow, gt, mask)?;
    let m = resize_mask(mask, EVAL_MAX_SIDE);
    let errs = endpoint_errors(&resize_flow(flow, EVAL_MAX_SIDE), &resize_flow(gt, EVAL_MAX_SIDE), &m);
    if errs.is_empty() {
        return Err(Error::InvalidInput("evaluation mask vanished after resizing".into()));
    }
    Ok(thresholds
        .iter()
        .map(|&t| FlowAccuracyReport {
            threshold: t,
            fraction: errs.iter().filter(|&&e| e < t).count() as f64 / errs.len() as f64,
            count: errs.len(),
        })
        .collect())
}

pub fn endpoint_accuracy(flow: &FlowField, gt: &FlowField, mask: &ObjectMask, threshold: f64) -> Result<FlowAccuracyReport> {
    Ok(endpoint_accuracy_sweep(flow, gt, mask, &[threshold])?[0])
}

/// Thresholds of the accuracy-vs-threshold sweep.
pub fn sweep_thresholds() -> Vec<f64> {
    (1..=15).map(f64::from).collect()
}

/// Mean endpoint distance `|T(i) i - G(i) i|` over the mask, at the native
/// resolution.
pub fn mean_endpoint_error(field: &AffineField, gt: &AffineField, mask: &ObjectMask) -> Result<f64> {
    if field.height != gt.height || field.width != gt.width || mask.height != gt.height || mask.width != gt.width {
        return Err(Error::Shape("field, ground truth and mask sizes differ".into()));
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for y in 0..gt.height {
        for x in 0..gt.width {
            if mask.get(x, y) {
                let a = field.map_pixel(x, y);
                let b = gt.map_pixel(x, y);
                acc += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::InvalidInput("evaluation mask is empty".into()));
    }
    Ok(acc / n as f64)
}

/// Fraction of keypoints within `alpha * max(h, w)` of their ground truth.
pub fn pck(warped: &[[f64; 2]], gt: &[[f64; 2]], bbox: (f64, f64), alpha: f64) -> Result<f64> {
    if warped.len() != gt.len() {
        return Err(Error::Shape(format!("{} warped keypoints vs {} ground truth", warped.len(), gt.len())));
    }
    if gt.is_empty() {
        return Err(Error::InvalidInput("no keypoints".into()));
    }
    let radius = alpha * bbox.0.max(bbox.1);
    let hits = warped
        .iter()
        .zip(gt)
        .filter(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() <= radius)
        .count();
    Ok(hits as f64 / gt.len() as f64)
}

/// Maps keypoints through a field with bilinear parameter interpolation.
pub fn warp_keypoints(field: &AffineField, points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    points.iter().map(|&p| field.sample(p[0], p[1]).apply(p)).collect()
}

/// Intersection over union of two masks.
pub fn mask_iou(a: &ObjectMask, b: &ObjectMask) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::Shape(format!("masks {}x{} and {}x{}", a.height, a.width, b.height, b.width)));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        return Err(Error::InvalidInput("both masks are empty".into()));
    }
    Ok(inter as f64 / union as f64)
}

/// Source mask pulled into the target frame by a field; `None` if nothing
/// of it lands inside.
pub fn warp_object_mask(mask: &ObjectMask, field: &AffineField) -> Result<Option<ObjectMask>> {
    warp_mask(mask, field)
}

/// One line of a metric report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub param: f64,
    pub value: f64,
    pub count: usize,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("metric,param,value,count\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.metric, r.param, r.value, r.count));
    }
    out
}

pub fn sweep_csv(reports: &[FlowAccuracyReport]) -> String {
    let mut out = String::from("threshold,accuracy,count\n");
    for r in reports {
        out.push_str(&format!("{},{},{}\n", r.threshold, r.fraction, r.count));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flow_const(h: usize, w: usize, v: [f64; 2]) -> FlowField {
        FlowField { height: h, width: w, data: vec![v; h * w] }
    }

    #[test]
    fn exact_and_offset_flows() {
        let gt = flow_const(40, 60, [1.5, -2.0]);
        let mask = ObjectMask::full(40, 60);
        for t in [0.1, 5.0, 15.0] {
            assert_eq!(endpoint_accuracy(&gt, &gt, &mask, t).unwrap().fraction, 1.0);
        }
        // 10 px at 60 wide becomes 16.7 px at 100 wide.
        let off = flow_const(40, 60, [11.5, -2.0]);
        assert_eq!(endpoint_accuracy(&off, &gt, &mask, 5.0).unwrap().fraction, 0.0);
    }

    #[test]
    fn half_offset_matches_direct_count() {
        // Already 100 wide: no resampling, the direct count is exact.
        let (h, w) = (50, 100);
        let gt = FlowField::zeros(h, w);
        let mut flow = FlowField::zeros(h, w);
        for y in 0..h {
            for x in 50..w {
                flow.data[y * w + x] = [6.0, 0.0];
            }
        }
        let r = endpoint_accuracy(&flow, &gt, &ObjectMask::full(h, w), 5.0).unwrap();
        assert_eq!(r.fraction, 0.5);
        assert_eq!(r.count, h * w);
        // Strictly below: an error of exactly T is not correct.
        assert_eq!(endpoint_accuracy(&flow, &gt, &ObjectMask::full(h, w), 6.0).unwrap().fraction, 0.5);
    }

    #[test]
    fn resize_scales_vectors() {
        let f = resize_flow(&flow_const(200, 50, [4.0, 8.0]), 100);
        assert_eq!((f.height, f.width), (100, 25));
        assert!(f.data.iter().all(|v| (v[0] - 2.0).abs() < 1e-12 && (v[1] - 4.0).abs() < 1e-12));
    }

    #[test]
    fn empty_mask_rejected() {
        let gt = FlowField::zeros(10, 10);
        let mask = ObjectMask { height: 10, width: 10, data: vec![false; 100] };
        assert!(endpoint_accuracy(&gt, &gt, &mask, 5.0).is_err());
    }

    #[test]
    fn pck_cases() {
        let gt = vec![[10.0, 10.0], [20.0, 5.0]];
        assert_eq!(pck(&gt, &gt, (40.0, 60.0), 0.1).unwrap(), 1.0);
        let moved: Vec<[f64; 2]> = gt.iter().map(|p| [p[0] + 7.0, p[1]]).collect();
        assert_eq!(pck(&moved, &gt, (40.0, 60.0), 0.1).unwrap(), 0.0);
        assert_eq!(pck(&moved, &gt, (40.0, 60.0), 7.0 / 60.0).unwrap(), 1.0);
        assert!(pck(&[], &[], (1.0, 1.0), 0.1).is_err());
        assert!(pck(&gt[..1], &gt, (1.0, 1.0), 0.1).is_err());
    }

    #[test]
    fn iou_cases() {
        let a = ObjectMask::from_bbox(10, 10, 0, 0, 6, 4).unwrap();
        let b = ObjectMask::from_bbox(10, 10, 3, 0, 9, 4).unwrap();
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        let c = ObjectMask::from_bbox(10, 10, 0, 6, 9, 9).unwrap();
        assert_eq!(mask_iou(&a, &c).unwrap(), 0.0);
        // 24 shared pixels out of 72 covered.
        assert_eq!(mask_iou(&a, &b).unwrap(), 1.0 / 3.0);
        let empty = ObjectMask { height: 10, width: 10, data: vec![false; 100] };
        assert!(mask_iou(&empty, &empty).is_err());
    }

    #[test]
    fn keypoint_text_round_trip() {
        let k = Keypoints { points: vec![[1.0, 2.5], [3.0, 4.0]], bbox: (20.0, 30.0) };
        assert_eq!(Keypoints::parse(&k.to_text()).unwrap(), k);
        assert!(Keypoints::parse("1 2\n").is_err());
        assert!(k.check_bounds(5, 5).is_ok());
        assert!(k.check_bounds(4, 3).is_err());
    }

    #[test]
    fn keypoints_follow_the_field() {
        let t = crate::geometry::Affine2D::translation(2.0, -1.0);
        let f = AffineField::constant(8, 8, t);
        assert_eq!(warp_keypoints(&f, &[[3.0, 3.0]]), vec![[5.0, 2.0]]);
    }
}
