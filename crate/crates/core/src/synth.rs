//! Synthetic scenes and image pairs with exact ground-truth fields.

use rand::Rng;

use crate::error::{Error, Result};
use crate::features::{blur, gaussian_kernel};
use crate::geometry::{warp_image, Affine2D, AffineField, GridAffineField};
use crate::image::Image;
use crate::supervision::ObjectMask;

/// Smallest side accepted by [`synth_pair`].
pub const MIN_SYNTH_SIDE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthMode {
    Global,
    QuadSplit,
    Flip,
}

impl std::str::FromStr for SynthMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(SynthMode::Global),
            "quadsplit" => Ok(SynthMode::QuadSplit),
            "flip" => Ok(SynthMode::Flip),
            other => Err(Error::InvalidInput(format!("unknown synth mode {other:?}"))),
        }
    }
}

/// Sampling ranges for a random affine about a centre point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineRanges {
    pub max_rotation_deg: f64,
    /// Scale drawn log-uniformly from `[lo, hi]`.
    pub scale: (f64, f64),
    pub max_shear: f64,
    /// Translation bound as a fraction of the longer image side.
    pub max_translation: f64,
}

impl AffineRanges {
    pub const GLOBAL: AffineRanges = AffineRanges {
        max_rotation_deg: 20.0,
        scale: (0.8, 1.25),
        max_shear: 0.1,
        max_translation: 0.1,
    };
    pub const MILD: AffineRanges = AffineRanges {
        max_rotation_deg: 10.0,
        scale: (0.9, 1.1),
        max_shear: 0.05,
        max_translation: 0.05,
    };
    pub const LOCAL: AffineRanges = AffineRanges {
        max_rotation_deg: 8.0,
        scale: (0.92, 1.08),
        max_shear: 0.05,
        max_translation: 0.04,
    };
    pub const NONE: AffineRanges = AffineRanges {
        max_rotation_deg: 0.0,
        scale: (1.0, 1.0),
        max_shear: 0.0,
        max_translation: 0.0,
    };
}

fn symmetric(rng: &mut impl Rng, bound: f64) -> f64 {
    if bound > 0.0 {
        rng.gen_range(-bound..=bound)
    } else {
        0.0
    }
}

/// Random `scale * rotation * shear` about `center`, plus a translation.
pub fn draw_affine(rng: &mut impl Rng, ranges: &AffineRanges, center: [f64; 2], side: f64) -> Affine2D {
    let theta = symmetric(rng, ranges.max_rotation_deg).to_radians();
    let (lo, hi) = ranges.scale;
    let s = if hi > lo { rng.gen_range(lo.ln()..=hi.ln()).exp() } else { lo };
    let sh = symmetric(rng, ranges.max_shear);
    let t = [
        symmetric(rng, ranges.max_translation) * side,
        symmetric(rng, ranges.max_translation) * side,
    ];
    let (c, sn) = (theta.cos(), theta.sin());
    // s * R * [[1, sh], [0, 1]]
    let a11 = s * c;
    let a12 = s * (c * sh - sn);
    let a21 = s * sn;
    let a22 = s * (sn * sh + c);
    Affine2D::new(
        a11,
        a12,
        center[0] - (a11 * center[0] + a12 * center[1]) + t[0],
        a21,
        a22,
        center[1] - (a21 * center[0] + a22 * center[1]) + t[1],
    )
}

fn image_center(h: usize, w: usize) -> [f64; 2] {
    [(w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0]
}

/// Ground-truth field for a mode.
pub fn draw_field(rng: &mut impl Rng, mode: SynthMode, height: usize, width: usize) -> AffineField {
    let side = height.max(width) as f64;
    let center = image_center(height, width);
    match mode {
        SynthMode::Global => AffineField::constant(height, width, draw_affine(rng, &AffineRanges::GLOBAL, center, side)),
        SynthMode::QuadSplit => {
            let base = draw_affine(rng, &AffineRanges::MILD, center, side);
            let grid = GridAffineField::identity(2, height, width);
            let cells = (0..4)
                .map(|k| {
                    let cc = grid.cell_center(k / 2, k % 2);
                    base.compose(&draw_affine(rng, &AffineRanges::LOCAL, cc, side))
                })
                .collect();
            GridAffineField::new(2, height, width, cells)
                .expect("four cells for level 2")
                .to_dense()
        }
        SynthMode::Flip => {
            let mirror = Affine2D::new(-1.0, 0.0, width as f64 - 1.0, 0.0, 1.0, 0.0);
            AffineField::constant(height, width, mirror.compose(&draw_affine(rng, &AffineRanges::MILD, center, side)))
        }
    }
}

/// A source/target pair with optional object masks and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub source: Image,
    pub target: Image,
    pub source_mask: Option<ObjectMask>,
    pub target_mask: Option<ObjectMask>,
    /// Maps each target pixel to its source location.
    pub gt_field: Option<AffineField>,
}

impl TrainingPair {
    pub fn validate(&self) -> Result<()> {
        if self.source.channels != self.target.channels {
            return Err(Error::Shape(format!(
                "source has {} channels, target {}",
                self.source.channels, self.target.channels
            )));
        }
        let check = |m: &Option<ObjectMask>, img: &Image, what: &str| -> Result<()> {
            match m {
                Some(m) if m.height != img.height || m.width != img.width => Err(Error::Shape(format!(
                    "{what} mask {}x{} vs image {}x{}",
                    m.height, m.width, img.height, img.width
                ))),
                _ => Ok(()),
            }
        };
        check(&self.source_mask, &self.source, "source")?;
        check(&self.target_mask, &self.target, "target")?;
        if let Some(f) = &self.gt_field {
            if f.height != self.target.height || f.width != self.target.width {
                return Err(Error::Shape("ground-truth field does not match the target".into()));
            }
        }
        Ok(())
    }
}

/// Pulls a mask through a field with the image warp and thresholds at 0.5.
pub fn warp_mask(mask: &ObjectMask, field: &AffineField) -> Result<Option<ObjectMask>> {
    let img = Image::new(
        mask.height,
        mask.width,
        1,
        mask.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    )?;
    let w = warp_image(&img, field)?;
    let data: Vec<bool> = w.data.iter().map(|&v| v >= 0.5).collect();
    Ok(data.iter().any(|&b| b).then_some(ObjectMask { height: mask.height, width: mask.width, data }))
}

/// Builds the pair `(image, warp(image, field))` with `field` as ground truth.
pub fn pair_from_field(image: &Image, mask: Option<&ObjectMask>, field: AffineField) -> Result<TrainingPair> {
    let target = warp_image(image, &field)?;
    let target_mask = match mask {
        Some(m) => warp_mask(m, &field)?,
        None => None,
    };
    Ok(TrainingPair {
        source: image.clone(),
        target,
        source_mask: mask.cloned(),
        target_mask,
        gt_field: Some(field),
    })
}

/// Random synthetic pair. The target is produced by the same warp that
/// evaluation uses, so re-warping the source by the ground truth reproduces
/// it exactly.
pub fn synth_pair(image: &Image, mask: Option<&ObjectMask>, rng: &mut impl Rng, mode: SynthMode) -> Result<TrainingPair> {
    if image.height.min(image.width) < MIN_SYNTH_SIDE {
        return Err(Error::ImageTooSmall { height: image.height, width: image.width, min: MIN_SYNTH_SIDE });
    }
    let field = draw_field(rng, mode, image.height, image.width);
    pair_from_field(image, mask, field)
}

fn normalize_range(v: &mut [f64], lo: f64, hi: f64) {
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (max - min).max(1e-12);
    for x in v.iter_mut() {
        *x = lo + (*x - min) / span * (hi - lo);
    }
}

/// Procedural grayscale scene: smooth background clutter plus a textured
/// elliptical object near the centre, returned with the object's mask.
pub fn procedural_scene(size: usize, rng: &mut impl Rng) -> (Image, ObjectMask) {
    let n = size * size;
    let k = size as f64 / 128.0;
    let noise: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
    let mut img = blur(&noise, size, size, &gaussian_kernel(3.0 * k));
    normalize_range(&mut img, 0.0, 0.5);
    let ellipse = |cx: f64, cy: f64, rx: f64, ry: f64, th: f64, x: f64, y: f64| {
        let (c, s) = (th.cos(), th.sin());
        let u = ((x - cx) * c + (y - cy) * s) / rx;
        let v = (-(x - cx) * s + (y - cy) * c) / ry;
        u * u + v * v < 1.0
    };
    for _ in 0..25 {
        let (cx, cy) = (rng.gen_range(0.0..size as f64), rng.gen_range(0.0..size as f64));
        let (rx, ry) = (rng.gen_range(3.0..12.0) * k, rng.gen_range(3.0..12.0) * k);
        let th = rng.gen_range(0.0..std::f64::consts::PI);
        let value = rng.gen::<f64>();
        for y in 0..size {
            for x in 0..size {
                if ellipse(cx, cy, rx, ry, th, x as f64, y as f64) {
                    img[y * size + x] = value;
                }
            }
        }
    }
    let half = size as f64 / 2.0;
    let (cx, cy) = (half + rng.gen_range(-8.0..8.0) * k, half + rng.gen_range(-8.0..8.0) * k);
    let (rx, ry) = (rng.gen_range(28.0..40.0) * k, rng.gen_range(28.0..40.0) * k);
    let tex_noise: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
    let mut tex = blur(&tex_noise, size, size, &gaussian_kernel(1.5 * k));
    normalize_range(&mut tex, 0.0, 1.0);
    let mut mask = vec![false; n];
    for y in 0..size {
        for x in 0..size {
            if ellipse(cx, cy, rx, ry, 0.0, x as f64, y as f64) {
                let p = y * size + x;
                mask[p] = true;
                img[p] = 0.3 * img[p] + 0.7 * tex[p];
            }
        }
    }
    let image = Image { height: size, width: size, channels: 1, data: img };
    (image, ObjectMask { height: size, width: size, data: mask })
}
