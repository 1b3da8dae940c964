//! Tape-based reverse-mode differentiation over NCHW `f64` tensors.
//!
//! A [`Graph`] records nodes in creation order; [`Graph::backward`] walks the
//! tape in reverse. Parameters enter as leaves tagged with a caller-chosen
//! index so gradients can be routed back to their blocks.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::{cell_center, grid_weights};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    /// `(batch, channels, height, width)`.
    pub dims: [usize; 4],
    pub data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "tensor {:?} needs {} values, got {}",
                dims,
                dims.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self { dims, data: vec![0.0; dims.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { dims: [1, 1, 1, 1], data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, ch, h, w] = self.dims;
        self.data[((n * ch + c) * h + y) * w + x]
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }
}

pub type NodeId = usize;

/// Operation kinds, used for fault injection and reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum OpKind {
    Input,
    Param,
    Conv2d,
    Relu,
    AvgPool,
    Upsample,
    Dense,
    Concat,
    AffineAtPoints,
    Compose,
    FlowLoss,
    Warp,
}

/// Decoding of a raw `6 x gh x gw` head into absolute affine parameters at
/// arbitrary points. Each cell's raw output is a residual about the identity,
/// centred on the cell centre `c`: `p -> c + (I + R)(p - c) + s * t`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointDecode {
    pub points: Vec<[f64; 2]>,
    pub image_height: usize,
    pub image_width: usize,
    /// Multipliers applied to the raw translation outputs.
    pub translation_scale: [f64; 2],
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(usize),
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize },
    Relu(NodeId),
    AvgPool(NodeId),
    Upsample(NodeId),
    Dense { x: NodeId, w: NodeId, b: NodeId },
    Concat(NodeId, NodeId),
    AffineAtPoints { x: NodeId, decode: PointDecode },
    Compose { outer: NodeId, inner: NodeId },
    FlowLoss { x: NodeId, points: Vec<[f64; 2]>, targets: Vec<[f64; 2]> },
    Warp { img: NodeId, field: NodeId },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Param(_) => OpKind::Param,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu(_) => OpKind::Relu,
            Op::AvgPool(_) => OpKind::AvgPool,
            Op::Upsample(_) => OpKind::Upsample,
            Op::Dense { .. } => OpKind::Dense,
            Op::Concat(..) => OpKind::Concat,
            Op::AffineAtPoints { .. } => OpKind::AffineAtPoints,
            Op::Compose { .. } => OpKind::Compose,
            Op::FlowLoss { .. } => OpKind::FlowLoss,
            Op::Warp { .. } => OpKind::Warp,
        }
    }
}

struct Node {
    op: Op,
    value: Tensor4,
}

/// Gradients keyed by parameter index.
pub type Gradients = BTreeMap<usize, Vec<f64>>;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

/// `c = alpha * op(a) * op(b) + beta * c` with row-major operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe the row-major (or transposed) layout of
    // slices whose lengths are checked above.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.oh * self.ow;
        for c in 0..self.ci {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * p;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let dst = &mut cols[row + oy * self.ow..row + (oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.oh * self.ow;
        for c in 0..self.ci {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * p;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += cols[row + oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adaptive pooling bin `[start, end)` for output index `i`.
#[inline]
fn pool_bin(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end.max(start + 1))
}

/// Bilinear taps `(index, weight)` into an `h x w` plane at `(x, y)`, with
/// `usize::MAX` marking taps outside the plane, plus the fractional offsets.
#[inline]
fn bilinear_taps(h: usize, w: usize, x: f64, y: f64) -> ([(usize, f64); 4], [f64; 2]) {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let idx = |xi: i64, yi: i64| -> usize {
        if xi < 0 || yi < 0 || xi >= w as i64 || yi >= h as i64 {
            usize::MAX
        } else {
            yi as usize * w + xi as usize
        }
    };
    (
        [
            (idx(x0, y0), (1.0 - fx) * (1.0 - fy)),
            (idx(x0 + 1, y0), fx * (1.0 - fy)),
            (idx(x0, y0 + 1), (1.0 - fx) * fy),
            (idx(x0 + 1, y0 + 1), fx * fy),
        ],
        [fx, fy],
    )
}

/// Row-major indices of the six affine parameters.
const A11: usize = 0;
const A12: usize = 1;
const TX: usize = 2;
const A21: usize = 3;
const A22: usize = 4;
const TY: usize = 5;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Makes every backward rule of `kind` deliberately wrong. Used to prove
    /// that gradient checks catch broken layers.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor4 {
        &self.nodes[id].value
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id].op.kind()
    }

    fn push(&mut self, op: Op, value: Tensor4) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    fn dims(&self, id: NodeId) -> [usize; 4] {
        self.nodes[id].value.dims
    }

    pub fn input(&mut self, t: Tensor4) -> NodeId {
        self.push(Op::Input, t)
    }

    pub fn param(&mut self, index: usize, t: Tensor4) -> NodeId {
        self.push(Op::Param(index), t)
    }

    /// 2-D convolution. `w` is `(co, ci, kh, kw)`, `b` is `(1, co, 1, 1)`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let [n, ci, h, wd] = self.dims(x);
        let [co, wci, kh, kw] = self.dims(w);
        if wci != ci || self.dims(b) != [1, co, 1, 1] || stride == 0 {
            return Err(Error::Shape(format!(
                "conv2d: input {:?}, weight {:?}, bias {:?}",
                self.dims(x),
                self.dims(w),
                self.dims(b)
            )));
        }
        let (Some(oh), Some(ow)) = (conv_out(h, kh, stride, pad), conv_out(wd, kw, stride, pad)) else {
            return Err(Error::Shape(format!("conv2d: kernel {kh}x{kw} larger than padded {h}x{wd}")));
        };
        let g = ConvGeom { ci, h, w: wd, kh, kw, oh, ow, stride, pad };
        let p = oh * ow;
        let kk = ci * kh * kw;
        let mut out = Tensor4::zeros([n, co, oh, ow]);
        let mut cols = vec![0.0; kk * p];
        let xv = &self.nodes[x].value;
        let wv = &self.nodes[w].value.data;
        let bv = &self.nodes[b].value.data;
        for item in 0..n {
            g.im2col(&xv.data[item * ci * h * wd..(item + 1) * ci * h * wd], &mut cols);
            let o = &mut out.data[item * co * p..(item + 1) * co * p];
            for (c, chunk) in o.chunks_mut(p).enumerate() {
                chunk.fill(bv[c]);
            }
            gemm(co, kk, p, wv, false, &cols, false, o, 1.0);
        }
        Ok(self.push(Op::Conv2d { x, w, b, stride, pad }, out))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut v = self.nodes[x].value.clone();
        for e in &mut v.data {
            if *e < 0.0 {
                *e = 0.0;
            }
        }
        self.push(Op::Relu(x), v)
    }

    /// Adaptive average pooling to `oh x ow`.
    pub fn avg_pool(&mut self, x: NodeId, oh: usize, ow: usize) -> Result<NodeId> {
        let [n, c, h, w] = self.dims(x);
        if oh == 0 || ow == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("avg_pool {h}x{w} -> {oh}x{ow}")));
        }
        let xv = &self.nodes[x].value;
        let mut out = Tensor4::zeros([n, c, oh, ow]);
        for plane in 0..n * c {
            let src = &xv.data[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                let (y0, y1) = pool_bin(oy, h, oh);
                for ox in 0..ow {
                    let (x0, x1) = pool_bin(ox, w, ow);
                    let mut acc = 0.0;
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            acc += src[yy * w + xx];
                        }
                    }
                    out.data[(plane * oh + oy) * ow + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        Ok(self.push(Op::AvgPool(x), out))
    }

    /// Bilinear resize to `oh x ow` with half-pixel centres and clamped
    /// borders (the same rule as affine grid upsampling).
    pub fn upsample(&mut self, x: NodeId, oh: usize, ow: usize) -> Result<NodeId> {
        let [n, c, h, w] = self.dims(x);
        if oh == 0 || ow == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("upsample {h}x{w} -> {oh}x{ow}")));
        }
        let xv = &self.nodes[x].value;
        let mut out = Tensor4::zeros([n, c, oh, ow]);
        for oy in 0..oh {
            for ox in 0..ow {
                let taps = grid_weights(h, w, oh, ow, ox as f64, oy as f64);
                for plane in 0..n * c {
                    let src = &xv.data[plane * h * w..(plane + 1) * h * w];
                    out.data[(plane * oh + oy) * ow + ox] = taps.iter().map(|(i, wt)| wt * src[*i]).sum();
                }
            }
        }
        Ok(self.push(Op::Upsample(x), out))
    }

    /// Fully connected layer on the flattened item: `w` is `(o, f, 1, 1)`,
    /// `b` is `(1, o, 1, 1)`; output `(n, o, 1, 1)`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        let n = xv.dims[0];
        let f = xv.item_len();
        let [o, wf, ..] = self.dims(w);
        if wf * self.dims(w)[2] * self.dims(w)[3] != f || self.dims(b) != [1, o, 1, 1] {
            return Err(Error::Shape(format!(
                "dense: input {:?}, weight {:?}, bias {:?}",
                xv.dims,
                self.dims(w),
                self.dims(b)
            )));
        }
        let mut out = Tensor4::zeros([n, o, 1, 1]);
        for item in 0..n {
            out.data[item * o..(item + 1) * o].copy_from_slice(&self.nodes[b].value.data);
        }
        gemm(n, f, o, &xv.data, false, &self.nodes[w].value.data, true, &mut out.data, 1.0);
        Ok(self.push(Op::Dense { x, w, b }, out))
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let [n, ca, h, w] = self.dims(a);
        let [nb, cb, hb, wb] = self.dims(b);
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::Shape(format!("concat {:?} with {:?}", self.dims(a), self.dims(b))));
        }
        let mut out = Tensor4::zeros([n, ca + cb, h, w]);
        let (la, lb) = (ca * h * w, cb * h * w);
        for item in 0..n {
            let dst = &mut out.data[item * (la + lb)..(item + 1) * (la + lb)];
            dst[..la].copy_from_slice(&self.nodes[a].value.data[item * la..(item + 1) * la]);
            dst[la..].copy_from_slice(&self.nodes[b].value.data[item * lb..(item + 1) * lb]);
        }
        Ok(self.push(Op::Concat(a, b), out))
    }

    /// Decodes a `(1, 6, gh, gw)` raw head into absolute affine parameters at
    /// each point; output `(1, 6, m, 1)`.
    pub fn affine_at_points(&mut self, x: NodeId, decode: PointDecode) -> Result<NodeId> {
        let [n, c, gh, gw] = self.dims(x);
        if n != 1 || c != 6 {
            return Err(Error::Shape(format!("affine head must be (1, 6, h, w), got {:?}", self.dims(x))));
        }
        let dev = decode_deviation(&self.nodes[x].value.data, gh, gw, &decode);
        let m = decode.points.len();
        let mut out = Tensor4::zeros([1, 6, m, 1]);
        for (k, p) in decode.points.iter().enumerate() {
            let taps = grid_weights(gh, gw, decode.image_height, decode.image_width, p[0], p[1]);
            for q in 0..6 {
                let mut acc = 0.0;
                for (cell, wt) in taps {
                    if wt != 0.0 {
                        acc += wt * dev[cell * 6 + q];
                    }
                }
                out.data[q * m + k] = acc + IDENTITY[q];
            }
        }
        Ok(self.push(Op::AffineAtPoints { x, decode }, out))
    }

    /// Per-point product `outer * inner` of two `(1, 6, m, 1)` affine lists.
    pub fn compose(&mut self, outer: NodeId, inner: NodeId) -> Result<NodeId> {
        let d = self.dims(outer);
        if d != self.dims(inner) || d[0] != 1 || d[1] != 6 || d[3] != 1 {
            return Err(Error::Shape(format!("compose {:?} with {:?}", d, self.dims(inner))));
        }
        let m = d[2];
        let o = &self.nodes[outer].value.data;
        let i = &self.nodes[inner].value.data;
        let mut out = Tensor4::zeros(d);
        for k in 0..m {
            let g = |v: &[f64], q: usize| v[q * m + k];
            let r = &mut out.data;
            r[A11 * m + k] = g(o, A11) * g(i, A11) + g(o, A12) * g(i, A21);
            r[A12 * m + k] = g(o, A11) * g(i, A12) + g(o, A12) * g(i, A22);
            r[TX * m + k] = g(o, A11) * g(i, TX) + g(o, A12) * g(i, TY) + g(o, TX);
            r[A21 * m + k] = g(o, A21) * g(i, A11) + g(o, A22) * g(i, A21);
            r[A22 * m + k] = g(o, A21) * g(i, A12) + g(o, A22) * g(i, A22);
            r[TY * m + k] = g(o, A21) * g(i, TX) + g(o, A22) * g(i, TY) + g(o, TY);
        }
        Ok(self.push(Op::Compose { outer, inner }, out))
    }

    /// Mean squared endpoint distance `(1/m) sum |T_k p_k - q_k|^2` for a
    /// `(1, 6, m, 1)` affine list.
    pub fn flow_loss(&mut self, x: NodeId, points: Vec<[f64; 2]>, targets: Vec<[f64; 2]>) -> Result<NodeId> {
        let d = self.dims(x);
        let m = points.len();
        if m == 0 {
            return Err(Error::EmptySamples);
        }
        if targets.len() != m || d != [1, 6, m, 1] {
            return Err(Error::Shape(format!(
                "flow loss: {m} points, {} targets, affines {:?}",
                targets.len(),
                d
            )));
        }
        let v = &self.nodes[x].value.data;
        let mut acc = 0.0;
        for k in 0..m {
            let [ex, ey] = residual(v, m, k, points[k], targets[k]);
            acc += ex * ex + ey * ey;
        }
        Ok(self.push(Op::FlowLoss { x, points, targets }, Tensor4::scalar(acc / m as f64)))
    }

    /// Differentiable bilinear warp: `out(i) = img(T_i i)` with zero outside.
    /// `field` holds absolute per-pixel parameters `(n, 6, h, w)`.
    pub fn warp(&mut self, img: NodeId, field: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = self.dims(img);
        if self.dims(field) != [n, 6, h, w] {
            return Err(Error::Shape(format!("warp image {:?} with field {:?}", self.dims(img), self.dims(field))));
        }
        let iv = &self.nodes[img].value.data;
        let fv = &self.nodes[field].value.data;
        let mut out = Tensor4::zeros([n, c, h, w]);
        let hw = h * w;
        for item in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let [sx, sy] = warp_coord(fv, item, hw, y * w + x, x, y);
                    let (taps, _) = bilinear_taps(h, w, sx, sy);
                    for ch in 0..c {
                        let plane = &iv[(item * c + ch) * hw..][..hw];
                        let mut acc = 0.0;
                        for (idx, wt) in taps {
                            if idx != usize::MAX {
                                acc += wt * plane[idx];
                            }
                        }
                        out.data[(item * c + ch) * hw + y * w + x] = acc;
                    }
                }
            }
        }
        Ok(self.push(Op::Warp { img, field }, out))
    }

    /// Reverse sweep from a scalar node. Returns gradients for every
    /// parameter leaf reachable from it.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss >= self.nodes.len() {
            return Err(Error::NoForward);
        }
        if self.nodes[loss].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, node {loss} is {:?}",
                self.nodes[loss].value.dims
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss + 1];
        grads[loss] = Some(vec![1.0]);
        let mut out = Gradients::new();
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let faulty = self.fault == Some(node.op.kind());
            match &node.op {
                Op::Input => {}
                Op::Param(index) => {
                    let acc = out.entry(*index).or_insert_with(|| vec![0.0; g.len()]);
                    for (a, v) in acc.iter_mut().zip(&g) {
                        *a += v;
                    }
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (dx, mut dw, db) = self.conv_backward(*x, *w, *b, *stride, *pad, &g);
                    if faulty {
                        dw.iter_mut().for_each(|v| *v *= 1.5);
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[*x].value.data;
                    let slope = if faulty { 0.5 } else { 1.0 };
                    let dx = g
                        .iter()
                        .zip(xv)
                        .map(|(gv, v)| if *v > 0.0 { gv * slope } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::AvgPool(x) => {
                    let [n, c, h, w] = self.dims(*x);
                    let [_, _, oh, ow] = node.value.dims;
                    let mut dx = vec![0.0; n * c * h * w];
                    for plane in 0..n * c {
                        for oy in 0..oh {
                            let (y0, y1) = pool_bin(oy, h, oh);
                            for ox in 0..ow {
                                let (x0, x1) = pool_bin(ox, w, ow);
                                let mut share = g[(plane * oh + oy) * ow + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                                if faulty {
                                    share *= 0.9;
                                }
                                for yy in y0..y1 {
                                    for xx in x0..x1 {
                                        dx[plane * h * w + yy * w + xx] += share;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Upsample(x) => {
                    let [n, c, h, w] = self.dims(*x);
                    let [_, _, oh, ow] = node.value.dims;
                    let mut dx = vec![0.0; n * c * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let taps = grid_weights(h, w, oh, ow, ox as f64, oy as f64);
                            for plane in 0..n * c {
                                let gv = g[(plane * oh + oy) * ow + ox];
                                for (k, (i, wt)) in taps.iter().enumerate() {
                                    let wt = if faulty && k == 0 { wt * 1.3 } else { *wt };
                                    dx[plane * h * w + i] += wt * gv;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Dense { x, w, b } => {
                    let xv = &self.nodes[*x].value;
                    let n = xv.dims[0];
                    let f = xv.item_len();
                    let o = node.value.dims[1];
                    let wv = &self.nodes[*w].value.data;
                    let mut dx = vec![0.0; n * f];
                    gemm(n, o, f, &g, false, wv, false, &mut dx, 0.0);
                    let mut dw = vec![0.0; o * f];
                    gemm(o, n, f, &g, true, &xv.data, false, &mut dw, 0.0);
                    if faulty {
                        dw.iter_mut().for_each(|v| *v *= 1.5);
                    }
                    let mut db = vec![0.0; o];
                    for item in 0..n {
                        for (d, v) in db.iter_mut().zip(&g[item * o..(item + 1) * o]) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::Concat(a, b) => {
                    let [n, ca, h, w] = self.dims(*a);
                    let cb = self.dims(*b)[1];
                    let (la, lb) = (ca * h * w, cb * h * w);
                    let mut da = Vec::with_capacity(n * la);
                    let mut db = Vec::with_capacity(n * lb);
                    for item in 0..n {
                        let src = &g[item * (la + lb)..(item + 1) * (la + lb)];
                        da.extend_from_slice(&src[..la]);
                        db.extend_from_slice(&src[la..]);
                    }
                    if faulty {
                        db.iter_mut().for_each(|v| *v = -*v);
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AffineAtPoints { x, decode } => {
                    let [_, _, gh, gw] = self.dims(*x);
                    let m = decode.points.len();
                    let mut ddev = vec![0.0; gh * gw * 6];
                    for (k, p) in decode.points.iter().enumerate() {
                        let taps = grid_weights(gh, gw, decode.image_height, decode.image_width, p[0], p[1]);
                        for q in 0..6 {
                            let gv = g[q * m + k];
                            for (cell, wt) in taps {
                                if wt != 0.0 {
                                    ddev[cell * 6 + q] += wt * gv;
                                }
                            }
                        }
                    }
                    let mut dx = decode_deviation_backward(&ddev, gh, gw, decode);
                    if faulty {
                        dx.iter_mut().for_each(|v| *v *= 1.2);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Compose { outer, inner } => {
                    let m = node.value.dims[2];
                    let o = &self.nodes[*outer].value.data;
                    let i = &self.nodes[*inner].value.data;
                    let mut d_o = vec![0.0; 6 * m];
                    let mut d_i = vec![0.0; 6 * m];
                    for k in 0..m {
                        let at = |q: usize| q * m + k;
                        let gr = |q: usize| g[at(q)];
                        // Row 1 of the product.
                        d_o[at(A11)] += gr(A11) * i[at(A11)] + gr(A12) * i[at(A12)] + gr(TX) * i[at(TX)];
                        d_o[at(A12)] += gr(A11) * i[at(A21)] + gr(A12) * i[at(A22)] + gr(TX) * i[at(TY)];
                        d_o[at(TX)] += gr(TX);
                        d_o[at(A21)] += gr(A21) * i[at(A11)] + gr(A22) * i[at(A12)] + gr(TY) * i[at(TX)];
                        d_o[at(A22)] += gr(A21) * i[at(A21)] + gr(A22) * i[at(A22)] + gr(TY) * i[at(TY)];
                        d_o[at(TY)] += gr(TY);
                        d_i[at(A11)] += gr(A11) * o[at(A11)] + gr(A21) * o[at(A21)];
                        d_i[at(A21)] += gr(A11) * o[at(A12)] + gr(A21) * o[at(A22)];
                        d_i[at(A12)] += gr(A12) * o[at(A11)] + gr(A22) * o[at(A21)];
                        d_i[at(A22)] += gr(A12) * o[at(A12)] + gr(A22) * o[at(A22)];
                        d_i[at(TX)] += gr(TX) * o[at(A11)] + gr(TY) * o[at(A21)];
                        d_i[at(TY)] += gr(TX) * o[at(A12)] + gr(TY) * o[at(A22)];
                    }
                    if faulty {
                        d_i.iter_mut().for_each(|v| *v *= 1.5);
                    }
                    accumulate(&mut grads, *outer, d_o);
                    accumulate(&mut grads, *inner, d_i);
                }
                Op::FlowLoss { x, points, targets } => {
                    let m = points.len();
                    let v = &self.nodes[*x].value.data;
                    let scale = g[0] * 2.0 / m as f64 * if faulty { 1.5 } else { 1.0 };
                    let mut dx = vec![0.0; 6 * m];
                    for k in 0..m {
                        let p = points[k];
                        let [ex, ey] = residual(v, m, k, p, targets[k]);
                        dx[A11 * m + k] = scale * ex * p[0];
                        dx[A12 * m + k] = scale * ex * p[1];
                        dx[TX * m + k] = scale * ex;
                        dx[A21 * m + k] = scale * ey * p[0];
                        dx[A22 * m + k] = scale * ey * p[1];
                        dx[TY * m + k] = scale * ey;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Warp { img, field } => {
                    let (dimg, dfield) = self.warp_backward(*img, *field, &g, faulty);
                    accumulate(&mut grads, *img, dimg);
                    accumulate(&mut grads, *field, dfield);
                }
            }
        }
        Ok(out)
    }

    fn conv_backward(
        &self,
        x: NodeId,
        w: NodeId,
        _b: NodeId,
        stride: usize,
        pad: usize,
        g: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let [n, ci, h, wd] = self.dims(x);
        let [co, _, kh, kw] = self.dims(w);
        let oh = conv_out(h, kh, stride, pad).expect("checked in forward");
        let ow = conv_out(wd, kw, stride, pad).expect("checked in forward");
        let geom = ConvGeom { ci, h, w: wd, kh, kw, oh, ow, stride, pad };
        let p = oh * ow;
        let kk = ci * kh * kw;
        let xv = &self.nodes[x].value.data;
        let wv = &self.nodes[w].value.data;
        let mut dx = vec![0.0; n * ci * h * wd];
        let mut dw = vec![0.0; co * kk];
        let mut db = vec![0.0; co];
        let mut cols = vec![0.0; kk * p];
        let mut dcols = vec![0.0; kk * p];
        for item in 0..n {
            let gi = &g[item * co * p..(item + 1) * co * p];
            for (c, chunk) in gi.chunks(p).enumerate() {
                db[c] += chunk.iter().sum::<f64>();
            }
            geom.im2col(&xv[item * ci * h * wd..(item + 1) * ci * h * wd], &mut cols);
            gemm(co, p, kk, gi, false, &cols, true, &mut dw, 1.0);
            gemm(kk, co, p, wv, true, gi, false, &mut dcols, 0.0);
            geom.col2im(&dcols, &mut dx[item * ci * h * wd..(item + 1) * ci * h * wd]);
        }
        (dx, dw, db)
    }

    fn warp_backward(&self, img: NodeId, field: NodeId, g: &[f64], faulty: bool) -> (Vec<f64>, Vec<f64>) {
        let [n, c, h, w] = self.dims(img);
        let hw = h * w;
        let iv = &self.nodes[img].value.data;
        let fv = &self.nodes[field].value.data;
        let mut dimg = vec![0.0; iv.len()];
        let mut dfield = vec![0.0; fv.len()];
        for item in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let pix = y * w + x;
                    let [sx, sy] = warp_coord(fv, item, hw, pix, x, y);
                    let (taps, [fx, fy]) = bilinear_taps(h, w, sx, sy);
                    let fetch = |plane: &[f64], t: usize| if taps[t].0 == usize::MAX { 0.0 } else { plane[taps[t].0] };
                    let (mut gsx, mut gsy) = (0.0, 0.0);
                    for ch in 0..c {
                        let base = (item * c + ch) * hw;
                        let gv = g[base + pix];
                        if gv == 0.0 {
                            continue;
                        }
                        let plane = &iv[base..base + hw];
                        for (idx, wt) in taps {
                            if idx != usize::MAX {
                                dimg[base + idx] += wt * gv;
                            }
                        }
                        let (v00, v10, v01, v11) = (fetch(plane, 0), fetch(plane, 1), fetch(plane, 2), fetch(plane, 3));
                        gsx += gv * ((v10 - v00) * (1.0 - fy) + (v11 - v01) * fy);
                        gsy += gv * ((v01 - v00) * (1.0 - fx) + (v11 - v10) * fx);
                    }
                    if faulty {
                        gsx *= 1.5;
                    }
                    let fb = item * 6 * hw + pix;
                    let (xf, yf) = (x as f64, y as f64);
                    dfield[fb + A11 * hw] += gsx * xf;
                    dfield[fb + A12 * hw] += gsx * yf;
                    dfield[fb + TX * hw] += gsx;
                    dfield[fb + A21 * hw] += gsy * xf;
                    dfield[fb + A22 * hw] += gsy * yf;
                    dfield[fb + TY * hw] += gsy;
                }
            }
        }
        (dimg, dfield)
    }
}

const IDENTITY: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

#[inline]
fn residual(v: &[f64], m: usize, k: usize, p: [f64; 2], q: [f64; 2]) -> [f64; 2] {
    let g = |q: usize| v[q * m + k];
    [
        g(A11) * p[0] + g(A12) * p[1] + g(TX) - q[0],
        g(A21) * p[0] + g(A22) * p[1] + g(TY) - q[1],
    ]
}

#[inline]
fn warp_coord(fv: &[f64], item: usize, hw: usize, pix: usize, x: usize, y: usize) -> [f64; 2] {
    let f = |q: usize| fv[(item * 6 + q) * hw + pix];
    let (xf, yf) = (x as f64, y as f64);
    [
        f(A11) * xf + f(A12) * yf + f(TX),
        f(A21) * xf + f(A22) * yf + f(TY),
    ]
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Per-cell deviation from the identity, `(gh * gw) x 6`, cell-major.
pub fn decode_deviation(raw: &[f64], gh: usize, gw: usize, d: &PointDecode) -> Vec<f64> {
    let plane = gh * gw;
    let mut dev = vec![0.0; plane * 6];
    for row in 0..gh {
        let cy = cell_center(row, gh, d.image_height);
        for col in 0..gw {
            let cx = cell_center(col, gw, d.image_width);
            let cell = row * gw + col;
            let r = |q: usize| raw[q * plane + cell];
            let o = &mut dev[cell * 6..cell * 6 + 6];
            o[A11] = r(A11);
            o[A12] = r(A12);
            o[TX] = r(TX) * d.translation_scale[0] - (r(A11) * cx + r(A12) * cy);
            o[A21] = r(A21);
            o[A22] = r(A22);
            o[TY] = r(TY) * d.translation_scale[1] - (r(A21) * cx + r(A22) * cy);
        }
    }
    dev
}

fn decode_deviation_backward(ddev: &[f64], gh: usize, gw: usize, d: &PointDecode) -> Vec<f64> {
    let plane = gh * gw;
    let mut draw = vec![0.0; plane * 6];
    for row in 0..gh {
        let cy = cell_center(row, gh, d.image_height);
        for col in 0..gw {
            let cx = cell_center(col, gw, d.image_width);
            let cell = row * gw + col;
            let g = &ddev[cell * 6..cell * 6 + 6];
            draw[A11 * plane + cell] = g[A11] - g[TX] * cx;
            draw[A12 * plane + cell] = g[A12] - g[TX] * cy;
            draw[TX * plane + cell] = g[TX] * d.translation_scale[0];
            draw[A21 * plane + cell] = g[A21] - g[TY] * cx;
            draw[A22 * plane + cell] = g[A22] - g[TY] * cy;
            draw[TY * plane + cell] = g[TY] * d.translation_scale[1];
        }
    }
    draw
}
