//! Affine transform algebra and dense affine fields.
//!
//! Pixel coordinates are zero-based with pixel centres at integer positions.
//! A field lives in the frame of the image it is defined over: the affine at
//! pixel `i` sends `i` (in homogeneous form `[x, y, 1]`) to the matching
//! location in the other image. Composition follows augmented 3x3 matrix
//! multiplication, so `compose(a, b)` applies `b` first.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;

/// A 2x3 affine map `[[a11, a12, tx], [a21, a22, ty]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine2D {
    pub a11: f64,
    pub a12: f64,
    pub tx: f64,
    pub a21: f64,
    pub a22: f64,
    pub ty: f64,
}

impl Default for Affine2D {
    fn default() -> Self {
        Self::identity()
    }
}

impl Affine2D {
    pub const fn new(a11: f64, a12: f64, tx: f64, a21: f64, a22: f64, ty: f64) -> Self {
        Self {
            a11,
            a12,
            tx,
            a21,
            a22,
            ty,
        }
    }

    pub const fn identity() -> Self {
        Self::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0)
    }

    pub const fn translation(tx: f64, ty: f64) -> Self {
        Self::new(1.0, 0.0, tx, 0.0, 1.0, ty)
    }

    pub const fn scale(s: f64) -> Self {
        Self::new(s, 0.0, 0.0, 0.0, s, 0.0)
    }

    /// Parameters in storage order `a11, a12, tx, a21, a22, ty`.
    pub const fn params(&self) -> [f64; 6] {
        [self.a11, self.a12, self.tx, self.a21, self.a22, self.ty]
    }

    pub const fn from_params(p: [f64; 6]) -> Self {
        Self::new(p[0], p[1], p[2], p[3], p[4], p[5])
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|v| v.is_finite())
    }

    pub fn det(&self) -> f64 {
        self.a11 * self.a22 - self.a12 * self.a21
    }

    #[inline]
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.a11 * p[0] + self.a12 * p[1] + self.tx,
            self.a21 * p[0] + self.a22 * p[1] + self.ty,
        ]
    }

    /// The affine whose augmented matrix is `M(outer) * M(inner)`.
    #[inline]
    pub fn compose(&self, inner: &Affine2D) -> Affine2D {
        let o = self;
        let i = inner;
        Affine2D {
            a11: o.a11 * i.a11 + o.a12 * i.a21,
            a12: o.a11 * i.a12 + o.a12 * i.a22,
            tx: o.a11 * i.tx + o.a12 * i.ty + o.tx,
            a21: o.a21 * i.a11 + o.a22 * i.a21,
            a22: o.a21 * i.a12 + o.a22 * i.a22,
            ty: o.a21 * i.tx + o.a22 * i.ty + o.ty,
        }
    }

    /// Inverse map, or `None` when the linear part is (numerically) singular.
    pub fn invert(&self) -> Option<Affine2D> {
        let det = self.det();
        if det.abs() < 1e-12 || !det.is_finite() {
            return None;
        }
        let inv = 1.0 / det;
        let a11 = self.a22 * inv;
        let a12 = -self.a12 * inv;
        let a21 = -self.a21 * inv;
        let a22 = self.a11 * inv;
        Some(Affine2D {
            a11,
            a12,
            tx: -(a11 * self.tx + a12 * self.ty),
            a21,
            a22,
            ty: -(a21 * self.tx + a22 * self.ty),
        })
    }

    /// Convex combination of parameters, used for parameter-space
    /// interpolation. Deviations from the identity are blended so that
    /// identical inputs reproduce themselves exactly.
    #[inline]
    pub(crate) fn weighted(items: &[(f64, &Affine2D)]) -> Affine2D {
        if let Some((_, first)) = items.first() {
            if items.iter().all(|(_, t)| t == first) {
                return **first;
            }
        }
        let id = Affine2D::identity().params();
        let mut p = [0.0; 6];
        for (w, t) in items {
            if *w == 0.0 {
                continue;
            }
            for ((acc, v), i) in p.iter_mut().zip(t.params()).zip(id) {
                *acc += w * (v - i);
            }
        }
        for (acc, i) in p.iter_mut().zip(id) {
            *acc += i;
        }
        Affine2D::from_params(p)
    }

    pub fn max_abs_diff(&self, other: &Affine2D) -> f64 {
        self.params()
            .iter()
            .zip(other.params())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Free-function form of [`Affine2D::apply`].
pub fn apply_affine(t: &Affine2D, p: [f64; 2]) -> [f64; 2] {
    t.apply(p)
}

/// Free-function form of [`Affine2D::compose`].
pub fn compose(outer: &Affine2D, inner: &Affine2D) -> Affine2D {
    outer.compose(inner)
}

/// A dense per-pixel field of affine maps.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineField {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<Affine2D>,
}

impl AffineField {
    pub fn new(height: usize, width: usize, cells: Vec<Affine2D>) -> Result<Self> {
        if cells.len() != height * width {
            return Err(Error::Shape(format!(
                "affine field has {} cells, expected {}x{}",
                cells.len(),
                height,
                width
            )));
        }
        if let Some(bad) = cells.iter().position(|c| !c.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite affine at cell {bad}"
            )));
        }
        Ok(Self {
            height,
            width,
            cells,
        })
    }

    pub fn identity(height: usize, width: usize) -> Self {
        Self::constant(height, width, Affine2D::identity())
    }

    pub fn constant(height: usize, width: usize, t: Affine2D) -> Self {
        Self {
            height,
            width,
            cells: vec![t; height * width],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &Affine2D {
        &self.cells[y * self.width + x]
    }

    pub fn is_identity(&self) -> bool {
        self.cells.iter().all(|c| *c == Affine2D::identity())
    }

    /// Parameter-space bilinear interpolation at a real location, clamped to
    /// the pixel-centre hull.
    pub fn sample(&self, x: f64, y: f64) -> Affine2D {
        let (x0, x1, fx) = clamp_axis(x, self.width);
        let (y0, y1, fy) = clamp_axis(y, self.height);
        Affine2D::weighted(&[
            ((1.0 - fx) * (1.0 - fy), self.get(x0, y0)),
            (fx * (1.0 - fy), self.get(x1, y0)),
            ((1.0 - fx) * fy, self.get(x0, y1)),
            (fx * fy, self.get(x1, y1)),
        ])
    }

    /// Location that pixel `(x, y)` maps to under its own affine.
    #[inline]
    pub fn map_pixel(&self, x: usize, y: usize) -> [f64; 2] {
        self.get(x, y).apply([x as f64, y as f64])
    }
}

/// Splits a continuous coordinate into two neighbouring indices and a weight,
/// clamping to `[0, n - 1]`.
#[inline]
fn clamp_axis(u: f64, n: usize) -> (usize, usize, f64) {
    if n <= 1 {
        return (0, 0, 0.0);
    }
    let max = (n - 1) as f64;
    let u = if u.is_nan() { 0.0 } else { u.clamp(0.0, max) };
    let i0 = (u.floor() as usize).min(n - 2);
    let f = u - i0 as f64;
    (i0, i0 + 1, f)
}

/// Per-pixel composition in list order; the first field is outermost.
pub fn compose_fields(levels: &[AffineField]) -> Result<AffineField> {
    let first = levels
        .first()
        .ok_or_else(|| Error::InvalidInput("compose_fields needs at least one field".into()))?;
    for (n, f) in levels.iter().enumerate() {
        if f.height != first.height || f.width != first.width {
            return Err(Error::Shape(format!(
                "field {n} is {}x{}, expected {}x{}",
                f.height, f.width, first.height, first.width
            )));
        }
    }
    let mut out = first.clone();
    for f in &levels[1..] {
        out.cells
            .par_iter_mut()
            .zip(f.cells.par_iter())
            .for_each(|(acc, inner)| *acc = acc.compose(inner));
    }
    Ok(out)
}

/// A level-`k` quad-tree field: `2^(k-1) x 2^(k-1)` affine cells tiling an
/// `image_height x image_width` image.
#[derive(Debug, Clone, PartialEq)]
pub struct GridAffineField {
    pub level: u32,
    pub image_height: usize,
    pub image_width: usize,
    pub cells: Vec<Affine2D>,
}

impl GridAffineField {
    pub fn new(
        level: u32,
        image_height: usize,
        image_width: usize,
        cells: Vec<Affine2D>,
    ) -> Result<Self> {
        if level == 0 || level > 16 {
            return Err(Error::InvalidInput(format!("grid level {level} out of range")));
        }
        let side = grid_side(level);
        if cells.len() != side * side {
            return Err(Error::Shape(format!(
                "level {level} grid needs {} cells, got {}",
                side * side,
                cells.len()
            )));
        }
        Ok(Self {
            level,
            image_height,
            image_width,
            cells,
        })
    }

    pub fn identity(level: u32, image_height: usize, image_width: usize) -> Self {
        let side = grid_side(level);
        Self {
            level,
            image_height,
            image_width,
            cells: vec![Affine2D::identity(); side * side],
        }
    }

    /// Cells per side, `2^(level-1)`.
    pub fn side(&self) -> usize {
        grid_side(self.level)
    }

    pub fn cell(&self, row: usize, col: usize) -> &Affine2D {
        &self.cells[row * self.side() + col]
    }

    /// Geometric centre of a cell in pixel coordinates.
    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        let side = self.side();
        [
            cell_center(col, side, self.image_width),
            cell_center(row, side, self.image_height),
        ]
    }

    /// Parameters bilinearly interpolated from cell centres at `(x, y)`.
    pub fn sample(&self, x: f64, y: f64) -> Affine2D {
        sample_param_grid(&self.cells, self.side(), self.side(), self.image_height, self.image_width, x, y)
    }

    /// Dense field at image resolution (parameter-space bilinear upsampling).
    pub fn to_dense(&self) -> AffineField {
        upsample_param_grid(
            &self.cells,
            self.side(),
            self.side(),
            self.image_height,
            self.image_width,
        )
    }
}

/// Free-function form of [`GridAffineField::to_dense`].
pub fn grid_to_dense(g: &GridAffineField) -> AffineField {
    g.to_dense()
}

pub fn grid_side(level: u32) -> usize {
    1usize << (level - 1)
}

/// Centre of cell `index` when `extent` pixels are split into `cells` equal parts.
#[inline]
pub fn cell_center(index: usize, cells: usize, extent: usize) -> f64 {
    (index as f64 + 0.5) * extent as f64 / cells as f64 - 0.5
}

/// Continuous cell coordinate of pixel position `p`.
#[inline]
fn cell_coord(p: f64, cells: usize, extent: usize) -> f64 {
    (p + 0.5) * cells as f64 / extent as f64 - 0.5
}

/// Bilinear weights over a `rows x cols` parameter grid at pixel `(x, y)`.
/// Returns `(index, weight)` for the four neighbours.
pub fn grid_weights(
    rows: usize,
    cols: usize,
    image_height: usize,
    image_width: usize,
    x: f64,
    y: f64,
) -> [(usize, f64); 4] {
    let (c0, c1, fx) = clamp_axis(cell_coord(x, cols, image_width), cols);
    let (r0, r1, fy) = clamp_axis(cell_coord(y, rows, image_height), rows);
    [
        (r0 * cols + c0, (1.0 - fx) * (1.0 - fy)),
        (r0 * cols + c1, fx * (1.0 - fy)),
        (r1 * cols + c0, (1.0 - fx) * fy),
        (r1 * cols + c1, fx * fy),
    ]
}

pub fn sample_param_grid(
    cells: &[Affine2D],
    rows: usize,
    cols: usize,
    image_height: usize,
    image_width: usize,
    x: f64,
    y: f64,
) -> Affine2D {
    let w = grid_weights(rows, cols, image_height, image_width, x, y);
    Affine2D::weighted(&[
        (w[0].1, &cells[w[0].0]),
        (w[1].1, &cells[w[1].0]),
        (w[2].1, &cells[w[2].0]),
        (w[3].1, &cells[w[3].0]),
    ])
}

/// Upsamples any `rows x cols` grid of affines covering the image to a dense
/// per-pixel field, interpolating parameters between cell centres and holding
/// them constant outside the centre hull.
pub fn upsample_param_grid(
    cells: &[Affine2D],
    rows: usize,
    cols: usize,
    image_height: usize,
    image_width: usize,
) -> AffineField {
    assert_eq!(cells.len(), rows * cols, "parameter grid size");
    let mut out = vec![Affine2D::identity(); image_height * image_width];
    out.par_chunks_mut(image_width.max(1))
        .enumerate()
        .for_each(|(y, row)| {
            for (x, cell) in row.iter_mut().enumerate() {
                *cell = sample_param_grid(
                    cells,
                    rows,
                    cols,
                    image_height,
                    image_width,
                    x as f64,
                    y as f64,
                );
            }
        });
    AffineField {
        height: image_height,
        width: image_width,
        cells: out,
    }
}

/// Pulls `img` through `field`: `out(i) = img(T_i * i)`, bilinear, with
/// zero contribution from samples outside the image.
pub fn warp_image(img: &Image, field: &AffineField) -> Result<Image> {
    if img.height != field.height || img.width != field.width {
        return Err(Error::Shape(format!(
            "warp: image {}x{} vs field {}x{}",
            img.height, img.width, field.height, field.width
        )));
    }
    let ch = img.channels;
    let mut out = Image::zeros(img.height, img.width, ch);
    out.data
        .par_chunks_mut(img.width * ch)
        .enumerate()
        .for_each(|(y, row)| {
            for x in 0..img.width {
                let [sx, sy] = field.map_pixel(x, y);
                for c in 0..ch {
                    row[x * ch + c] = img.sample_bilinear(sx, sy, c);
                }
            }
        });
    Ok(out)
}

/// A dense `height x width` displacement map, `(dx, dy)` per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub data: Vec<[f64; 2]>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, data: Vec<[f64; 2]>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "flow has {} vectors, expected {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![[0.0; 2]; height * width],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 2] {
        self.data[y * self.width + x]
    }

    /// Bilinear flow lookup, clamped at the borders.
    pub fn sample(&self, x: f64, y: f64) -> [f64; 2] {
        let (x0, x1, fx) = clamp_axis(x, self.width);
        let (y0, y1, fy) = clamp_axis(y, self.height);
        let mut out = [0.0; 2];
        for (w, v) in [
            ((1.0 - fx) * (1.0 - fy), self.get(x0, y0)),
            (fx * (1.0 - fy), self.get(x1, y0)),
            ((1.0 - fx) * fy, self.get(x0, y1)),
            (fx * fy, self.get(x1, y1)),
        ] {
            out[0] += w * v[0];
            out[1] += w * v[1];
        }
        out
    }
}

/// Displacement `T_i * i - i` at every pixel.
pub fn flow_from_field(field: &AffineField) -> FlowField {
    let mut data = vec![[0.0; 2]; field.height * field.width];
    for y in 0..field.height {
        for x in 0..field.width {
            let [mx, my] = field.map_pixel(x, y);
            data[y * field.width + x] = [mx - x as f64, my - y as f64];
        }
    }
    FlowField {
        height: field.height,
        width: field.width,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn homogeneous(t: &Affine2D) -> [[f64; 3]; 3] {
        [
            [t.a11, t.a12, t.tx],
            [t.a21, t.a22, t.ty],
            [0.0, 0.0, 1.0],
        ]
    }

    fn matmul(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let mut c = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    c[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        c
    }

    fn random_affine(rng: &mut ChaCha8Rng) -> Affine2D {
        Affine2D::from_params(std::array::from_fn(|_| rng.gen_range(-3.0..3.0)))
    }

    #[test]
    fn apply_examples() {
        assert_eq!(Affine2D::identity().apply([3.0, 4.0]), [3.0, 4.0]);
        let t = Affine2D::new(1.0, 0.0, 5.0, 0.0, 1.0, -2.0);
        assert_eq!(t.apply([0.0, 0.0]), [5.0, -2.0]);
        let t = Affine2D::new(2.0, 0.0, 1.0, 0.0, 1.0, -1.0);
        let m = homogeneous(&t);
        let oracle = [
            m[0][0] * 1.0 + m[0][1] * 1.0 + m[0][2],
            m[1][0] * 1.0 + m[1][1] * 1.0 + m[1][2],
        ];
        assert_eq!(oracle, [3.0, 0.0]);
        assert_eq!(t.apply([1.0, 1.0]), oracle);
    }

    #[test]
    fn compose_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_affine(&mut rng);
        assert_eq!(compose(&Affine2D::identity(), &t), t);
        assert_eq!(
            compose(&Affine2D::translation(1.0, 2.0), &Affine2D::translation(3.0, 4.0)),
            Affine2D::translation(4.0, 6.0)
        );
        for _ in 0..100 {
            let a = random_affine(&mut rng);
            let b = random_affine(&mut rng);
            let m = matmul(homogeneous(&a), homogeneous(&b));
            let c = compose(&a, &b);
            let expect = Affine2D::new(m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2]);
            assert!(c.max_abs_diff(&expect) < 1e-12);
            let p = [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)];
            let lhs = c.apply(p);
            let rhs = a.apply(b.apply(p));
            assert_abs_diff_eq!(lhs[0], rhs[0], epsilon = 1e-9);
            assert_abs_diff_eq!(lhs[1], rhs[1], epsilon = 1e-9);
        }
    }

    #[test]
    fn invert_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let t = random_affine(&mut rng);
            if t.det().abs() <= 1e-6 {
                continue;
            }
            let inv = t.invert().unwrap();
            assert!(t.compose(&inv).max_abs_diff(&Affine2D::identity()) < 1e-9);
        }
        assert!(Affine2D::new(1.0, 2.0, 0.0, 2.0, 4.0, 0.0).invert().is_none());
    }

    #[test]
    fn compose_fields_examples() {
        let id = AffineField::identity(3, 4);
        assert_eq!(compose_fields(&[id.clone()]).unwrap(), id);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = AffineField::new(3, 4, (0..12).map(|_| random_affine(&mut rng)).collect()).unwrap();
        assert_eq!(compose_fields(&[f.clone(), id.clone()]).unwrap(), f);

        let a = random_affine(&mut rng);
        let b = random_affine(&mut rng);
        let fa = AffineField::constant(3, 4, a);
        let fb = AffineField::constant(3, 4, b);
        let c = compose_fields(&[fa, fb]).unwrap();
        assert!(c.cells.iter().all(|cell| *cell == a.compose(&b)));
    }

    #[test]
    fn compose_fields_rejects_mismatch() {
        let err = compose_fields(&[AffineField::identity(3, 4), AffineField::identity(4, 3)]);
        assert!(matches!(err, Err(Error::Shape(_))));
        assert!(compose_fields(&[]).is_err());
    }

    #[test]
    fn grid_to_dense_constant_cases() {
        let t = Affine2D::new(1.1, 0.2, 3.0, -0.1, 0.9, -2.0);
        let g = GridAffineField::new(1, 20, 30, vec![t]).unwrap();
        assert!(g.to_dense().cells.iter().all(|c| *c == t));
        let g = GridAffineField::new(2, 20, 30, vec![t; 4]).unwrap();
        assert!(g.to_dense().cells.iter().all(|c| c.max_abs_diff(&t) < 1e-15));
    }

    #[test]
    fn grid_to_dense_midpoint_is_mean() {
        // 2x2 grid over a 33x33 image: centres at 7.75 and 24.25, midpoint 16.
        let cells = vec![
            Affine2D::translation(2.0, 0.0),
            Affine2D::translation(6.0, 4.0),
            Affine2D::translation(-2.0, 1.0),
            Affine2D::translation(0.0, 3.0),
        ];
        let g = GridAffineField::new(2, 33, 33, cells.clone()).unwrap();
        let [c0x, c0y] = g.cell_center(0, 0);
        let [c1x, _] = g.cell_center(0, 1);
        let mid = 0.5 * (c0x + c1x);
        assert_eq!(mid, 16.0);
        let dense = g.to_dense();
        let at = dense.get(16, c0y as usize);
        // c0y = 7.75 is not integral, so probe the continuous sampler too.
        let s = g.sample(mid, c0y);
        let mean = Affine2D::weighted(&[(0.5, &cells[0]), (0.5, &cells[1])]);
        assert!(s.max_abs_diff(&mean) < 1e-12);
        assert!(at.is_finite());
        // Cell centres reproduce the cell exactly.
        for r in 0..2 {
            for c in 0..2 {
                let [x, y] = g.cell_center(r, c);
                assert_eq!(g.sample(x, y), cells[r * 2 + c]);
            }
        }
    }

    #[test]
    fn grid_to_dense_linear_between_centres() {
        let cells = vec![
            Affine2D::new(1.0, 0.1, 2.0, 0.0, 1.0, 0.0),
            Affine2D::new(0.8, 0.0, -4.0, 0.3, 1.2, 5.0),
            Affine2D::translation(1.0, 1.0),
            Affine2D::translation(0.0, 0.0),
        ];
        let g = GridAffineField::new(2, 40, 40, cells).unwrap();
        let dense = g.to_dense();
        // Row 9.5 -> centres at x = 9.5 and 29.5; pick integer row 10 and check
        // second differences vanish along x between the centres.
        let y = 10;
        for x in 11..29 {
            let a = dense.get(x - 1, y).params();
            let b = dense.get(x, y).params();
            let c = dense.get(x + 1, y).params();
            for k in 0..6 {
                assert_abs_diff_eq!(a[k] - 2.0 * b[k] + c[k], 0.0, epsilon = 1e-12);
            }
        }
        // Outside the centre hull the parameters are held constant.
        assert_eq!(dense.get(0, 0), dense.get(5, 5));
    }

    #[test]
    fn warp_examples() {
        let img = Image::from_fn(8, 10, |x, y| (x * 3 + y * 7) as f64 / 100.0);
        assert_eq!(warp_image(&img, &AffineField::identity(8, 10)).unwrap(), img);

        let shifted = warp_image(&img, &AffineField::constant(8, 10, Affine2D::translation(-1.0, 0.0))).unwrap();
        for y in 0..8 {
            for x in 1..10 {
                assert_eq!(shifted.get(x, y, 0), img.get(x - 1, y, 0));
            }
            assert_eq!(shifted.get(0, y, 0), 0.0);
        }

        let ramp = Image::from_fn(6, 6, |x, _| x as f64);
        let half = warp_image(&ramp, &AffineField::constant(6, 6, Affine2D::translation(0.5, 0.0))).unwrap();
        for y in 0..6 {
            for x in 0..5 {
                assert_abs_diff_eq!(half.get(x, y, 0), (x as f64 + x as f64 + 1.0) / 2.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn warp_rejects_shape_mismatch() {
        let img = Image::zeros(4, 4, 1);
        assert!(warp_image(&img, &AffineField::identity(4, 5)).is_err());
    }

    #[test]
    fn flow_examples() {
        let f = flow_from_field(&AffineField::identity(4, 5));
        assert!(f.data.iter().all(|v| *v == [0.0, 0.0]));
        let f = flow_from_field(&AffineField::constant(4, 5, Affine2D::translation(2.0, 3.0)));
        assert!(f.data.iter().all(|v| *v == [2.0, 3.0]));
        let f = flow_from_field(&AffineField::constant(4, 5, Affine2D::scale(2.0)));
        for y in 0..4 {
            for x in 0..5 {
                let p = Affine2D::scale(2.0).apply([x as f64, y as f64]);
                assert_eq!(f.get(x, y), [p[0] - x as f64, p[1] - y as f64]);
                assert_eq!(f.get(x, y), [x as f64, y as f64]);
            }
        }
    }

    #[test]
    fn affine_field_rejects_bad_input() {
        assert!(AffineField::new(2, 2, vec![Affine2D::identity(); 3]).is_err());
        let mut cells = vec![Affine2D::identity(); 4];
        cells[2].tx = f64::NAN;
        assert!(AffineField::new(2, 2, cells).is_err());
        assert!(GridAffineField::new(2, 8, 8, vec![Affine2D::identity(); 3]).is_err());
        assert_eq!(GridAffineField::identity(1, 8, 8).cells.len(), 1);
        assert_eq!(GridAffineField::identity(3, 8, 8).cells.len(), 16);
    }
}
