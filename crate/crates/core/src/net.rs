//! Grid-level and pixel-level affine regressors, their parameters,
//! optimizer and gradient checking.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{decode_deviation, Gradients, Graph, NodeId, OpKind, PointDecode, Tensor4};
use crate::cost_volume::CostVolume;
use crate::error::{Error, Result};
use crate::geometry::{upsample_param_grid, Affine2D, AffineField, GridAffineField};
use crate::io::{decode_param_blocks, encode_param_blocks, ParamBlock};
use crate::supervision::SampleSet;

/// Channel widths of the four grid-regressor convolutions.
pub const GRID_WIDTHS: [usize; 4] = [32, 32, 64, 64];
/// Encoder widths of the pixel regressor.
pub const PIXEL_WIDTHS: [usize; 3] = [32, 32, 64];
/// Pooled cells per output cell side at level 1; halves per level, floor 1.
pub const LEVEL1_POOL: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Grid { level: u32 },
    Pixel,
}

/// How raw translation outputs become pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TranslationScale {
    /// Raw outputs are fractions of the image width/height.
    ImageSize,
    /// Raw outputs are pixels.
    Unit,
}

impl TranslationScale {
    pub fn factors(self, image_height: usize, image_width: usize) -> [f64; 2] {
        match self {
            TranslationScale::ImageSize => [image_width as f64, image_height as f64],
            TranslationScale::Unit => [1.0, 1.0],
        }
    }
}

/// Weights of one regressor plus the metadata needed to rebuild it.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub arch: Arch,
    pub in_channels: usize,
    pub seed: u64,
    pub translation_scale: TranslationScale,
    pub blocks: Vec<ParamBlock>,
}

fn conv_block(name: &str, co: usize, ci: usize, k: usize, rng: &mut ChaCha8Rng, zero: bool) -> [ParamBlock; 2] {
    let fan_in = (ci * k * k) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
    let data = if zero {
        vec![0.0; co * ci * k * k]
    } else {
        (0..co * ci * k * k).map(|_| normal.sample(rng)).collect()
    };
    [
        ParamBlock { name: format!("{name}.w"), shape: vec![co, ci, k, k], data },
        ParamBlock { name: format!("{name}.b"), shape: vec![1, co, 1, 1], data: vec![0.0; co] },
    ]
}

/// Pooled cells per output cell side for a grid level.
pub fn pool_factor(level: u32) -> usize {
    (LEVEL1_POOL >> (level - 1).min(31)).max(1)
}

impl NetParams {
    /// Grid regressor for `level` with a zero-initialized head.
    pub fn grid(level: u32, in_channels: usize, seed: u64) -> Result<Self> {
        if level == 0 || level > 8 {
            return Err(Error::InvalidInput(format!("grid level {level} out of range")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::new();
        let mut ci = in_channels;
        for (n, &co) in GRID_WIDTHS.iter().enumerate() {
            blocks.extend(conv_block(&format!("conv{n}"), co, ci, 3, &mut rng, false));
            ci = co;
        }
        let p = pool_factor(level);
        blocks.extend(conv_block("head", 6, ci, p, &mut rng, true));
        Ok(Self { arch: Arch::Grid { level }, in_channels, seed, translation_scale: TranslationScale::ImageSize, blocks })
    }

    /// Pixel-level encoder-decoder with a zero-initialized head.
    pub fn pixel(in_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [e0, e1, e2] = PIXEL_WIDTHS;
        let mut blocks = Vec::new();
        blocks.extend(conv_block("enc0", e0, in_channels, 3, &mut rng, false));
        blocks.extend(conv_block("enc1", e1, e0, 3, &mut rng, false));
        blocks.extend(conv_block("enc2", e2, e1, 3, &mut rng, false));
        blocks.extend(conv_block("dec1", e1, e2 + e1, 3, &mut rng, false));
        blocks.extend(conv_block("dec0", e0, e1 + e0, 3, &mut rng, false));
        blocks.extend(conv_block("head", 6, e0, 1, &mut rng, true));
        Self { arch: Arch::Pixel, in_channels, seed, translation_scale: TranslationScale::ImageSize, blocks }
    }

    /// Fills the head with small random weights (the default head is zero,
    /// which hides every other layer from gradient checks).
    pub fn randomize_head(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in self.blocks.iter_mut().filter(|b| b.name.starts_with("head.")) {
            for v in &mut b.data {
                *v = rng.gen_range(-scale..scale);
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(|b| b.data.len()).sum()
    }

    pub fn block_index(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut ParamBlock> {
        self.blocks.iter_mut().find(|b| b.name == name)
    }

    pub fn level(&self) -> Option<u32> {
        match self.arch {
            Arch::Grid { level } => Some(level),
            Arch::Pixel => None,
        }
    }

    fn tensor(&self, idx: usize) -> Tensor4 {
        let b = &self.blocks[idx];
        let mut dims = [1usize; 4];
        let rank = b.shape.len().min(4);
        dims[4 - rank..].copy_from_slice(&b.shape[b.shape.len() - rank..]);
        Tensor4 { dims, data: b.data.clone() }
    }

    fn conv(&self, g: &mut Graph, x: NodeId, leaves: &[NodeId], name: &str, stride: usize, pad: usize) -> Result<NodeId> {
        let wi = self.block_index(&format!("{name}.w")).ok_or_else(|| missing(name))?;
        let bi = self.block_index(&format!("{name}.b")).ok_or_else(|| missing(name))?;
        g.conv2d(x, leaves[wi], leaves[bi], stride, pad)
    }

    /// Records the regressor on `g` and returns the raw `(1, 6, gh, gw)`
    /// head. Parameter leaves are tagged `offset + block index`.
    pub fn build(&self, g: &mut Graph, x: NodeId, offset: usize) -> Result<NodeId> {
        let leaves: Vec<NodeId> = (0..self.blocks.len()).map(|i| g.param(offset + i, self.tensor(i))).collect();
        self.build_with_leaves(g, x, &leaves)
    }

    /// Like [`NetParams::build`] but reusing existing leaf nodes for the
    /// parameter blocks, in block order.
    pub fn build_with_leaves(&self, g: &mut Graph, x: NodeId, leaves: &[NodeId]) -> Result<NodeId> {
        let [_, c, h, w] = g.value(x).dims;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "regressor expects {} input channels, volume has {c}",
                self.in_channels
            )));
        }
        if leaves.len() != self.blocks.len() {
            return Err(Error::Shape(format!("{} leaves for {} blocks", leaves.len(), self.blocks.len())));
        }
        match self.arch {
            Arch::Grid { level } => {
                let side = crate::geometry::grid_side(level);
                let p = pool_factor(level);
                let mut y = g.avg_pool(x, h.div_ceil(2), w.div_ceil(2))?;
                for (n, stride) in [1, 2, 1, 2].into_iter().enumerate() {
                    let z = self.conv(g, y, leaves, &format!("conv{n}"), stride, 1)?;
                    y = g.relu(z);
                }
                let pooled = g.avg_pool(y, side * p, side * p)?;
                self.conv(g, pooled, leaves, "head", p, 0)
            }
            Arch::Pixel => {
                if h % 4 != 0 || w % 4 != 0 {
                    return Err(Error::Shape(format!("pixel regressor needs sides divisible by 4, got {h}x{w}")));
                }
                let z = self.conv(g, x, leaves, "enc0", 1, 1)?;
                let e0 = g.relu(z);
                let z = self.conv(g, e0, leaves, "enc1", 2, 1)?;
                let e1 = g.relu(z);
                let z = self.conv(g, e1, leaves, "enc2", 2, 1)?;
                let e2 = g.relu(z);
                let u1 = g.upsample(e2, h / 2, w / 2)?;
                let c1 = g.concat(u1, e1)?;
                let z = self.conv(g, c1, leaves, "dec1", 1, 1)?;
                let d1 = g.relu(z);
                let u0 = g.upsample(d1, h, w)?;
                let c0 = g.concat(u0, e0)?;
                let z = self.conv(g, c0, leaves, "dec0", 1, 1)?;
                let d0 = g.relu(z);
                self.conv(g, d0, leaves, "head", 1, 0)
            }
        }
    }

    /// Raw head output for a `(1, C, H, W)` input.
    pub fn forward_raw(&self, input: &Tensor4) -> Result<Tensor4> {
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let y = self.build(&mut g, x, 0)?;
        Ok(g.value(y).clone())
    }

    /// Point decoder for this regressor on an image of the given size.
    pub fn point_decode(&self, points: Vec<[f64; 2]>, image_height: usize, image_width: usize) -> PointDecode {
        PointDecode {
            points,
            image_height,
            image_width,
            translation_scale: self.translation_scale.factors(image_height, image_width),
        }
    }

    /// Splits graph gradients into per-block vectors (zeros where absent).
    pub fn collect_grads(&self, grads: &Gradients, offset: usize) -> Vec<Vec<f64>> {
        self.blocks
            .iter()
            .enumerate()
            .map(|(i, b)| grads.get(&(offset + i)).cloned().unwrap_or_else(|| vec![0.0; b.data.len()]))
            .collect()
    }

    pub fn to_blocks(&self) -> Vec<ParamBlock> {
        let arch = match self.arch {
            Arch::Grid { level } => f64::from(level),
            Arch::Pixel => 0.0,
        };
        let ts = match self.translation_scale {
            TranslationScale::ImageSize => 0.0,
            TranslationScale::Unit => 1.0,
        };
        let meta = vec![
            arch,
            self.in_channels as f64,
            f64::from((self.seed >> 32) as u32),
            f64::from(self.seed as u32),
            ts,
        ];
        let mut out = vec![ParamBlock { name: "meta".into(), shape: vec![meta.len()], data: meta }];
        out.extend(self.blocks.iter().cloned());
        out
    }

    pub fn from_blocks(mut blocks: Vec<ParamBlock>) -> Result<Self> {
        if blocks.first().map(|b| b.name.as_str()) != Some("meta") || blocks[0].data.len() != 5 {
            return Err(Error::InvalidInput("checkpoint lacks a meta block".into()));
        }
        let meta = blocks.remove(0).data;
        let int = |v: f64, what: &str| -> Result<u64> {
            if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                Ok(v as u64)
            } else {
                Err(Error::InvalidInput(format!("bad {what} {v} in checkpoint")))
            }
        };
        let level = int(meta[0], "architecture")? as u32;
        let in_channels = int(meta[1], "channel count")? as usize;
        let seed = (int(meta[2], "seed")? << 32) | int(meta[3], "seed")?;
        let translation_scale = match int(meta[4], "translation scale")? {
            0 => TranslationScale::ImageSize,
            1 => TranslationScale::Unit,
            v => return Err(Error::InvalidInput(format!("bad translation scale {v}"))),
        };
        let reference = if level == 0 { NetParams::pixel(in_channels, seed) } else { NetParams::grid(level, in_channels, seed)? };
        let shapes_ok = reference.blocks.len() == blocks.len()
            && reference.blocks.iter().zip(&blocks).all(|(a, b)| a.name == b.name && a.shape == b.shape);
        if !shapes_ok {
            return Err(Error::Shape("checkpoint blocks do not match the architecture".into()));
        }
        Ok(Self { arch: reference.arch, in_channels, seed, translation_scale, blocks })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        encode_param_blocks(&self.to_blocks())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Self::from_blocks(decode_param_blocks(bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn missing(name: &str) -> Error {
    Error::Shape(format!("parameter block {name} missing"))
}

/// Channel-first `(1, C, H, W)` view of a cost volume.
pub fn volume_tensor(c: &CostVolume) -> Tensor4 {
    Tensor4 { dims: [1, c.channels(), c.height, c.width], data: c.to_channels_first() }
}

/// Decodes a raw `(1, 6, gh, gw)` head into absolute cell affines.
pub fn decode_cells(raw: &Tensor4, decode: &PointDecode) -> Vec<Affine2D> {
    let [_, _, gh, gw] = raw.dims;
    let dev = decode_deviation(&raw.data, gh, gw, decode);
    dev.chunks_exact(6)
        .map(|d| Affine2D::new(1.0 + d[0], d[1], d[2], d[3], 1.0 + d[4], d[5]))
        .collect()
}

/// Level-k grid field regressed from a cost volume.
pub fn forward_grid(params: &NetParams, c: &CostVolume, image_height: usize, image_width: usize) -> Result<GridAffineField> {
    let Arch::Grid { level } = params.arch else {
        return Err(Error::InvalidInput("forward_grid needs grid-level parameters".into()));
    };
    let raw = params.forward_raw(&volume_tensor(c))?;
    let side = crate::geometry::grid_side(level);
    if raw.dims != [1, 6, side, side] {
        return Err(Error::Shape(format!("grid head produced {:?}", raw.dims)));
    }
    let cells = decode_cells(&raw, &params.point_decode(vec![], image_height, image_width));
    GridAffineField::new(level, image_height, image_width, cells)
}

/// Pixel-level field regressed from a cost volume, upsampled to the image.
pub fn forward_pixel(params: &NetParams, c: &CostVolume, image_height: usize, image_width: usize) -> Result<AffineField> {
    if params.arch != Arch::Pixel {
        return Err(Error::InvalidInput("forward_pixel needs pixel-level parameters".into()));
    }
    let raw = params.forward_raw(&volume_tensor(c))?;
    if raw.dims != [1, 6, c.height, c.width] {
        return Err(Error::Shape(format!("pixel head produced {:?}", raw.dims)));
    }
    let cells = decode_cells(&raw, &params.point_decode(vec![], image_height, image_width));
    Ok(upsample_param_grid(&cells, c.height, c.width, image_height, image_width))
}

/// Mean squared endpoint error `(1/N) sum |T_i i - f_i|^2` of a dense field
/// against samples, in image pixels.
pub fn loss_flow(field: &AffineField, samples: &SampleSet) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    let pairs = samples.pixel_pairs();
    let mut acc = 0.0;
    for (p, q) in &pairs {
        let m = field.sample(p[0], p[1]).apply(*p);
        acc += (m[0] - q[0]).powi(2) + (m[1] - q[1]).powi(2);
    }
    Ok(acc / pairs.len() as f64)
}

/// Records `loss_flow` for a regressor's raw output on `g`.
pub fn record_loss(
    g: &mut Graph,
    params: &NetParams,
    raw: NodeId,
    samples: &SampleSet,
    image_height: usize,
    image_width: usize,
) -> Result<NodeId> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    let (points, targets): (Vec<_>, Vec<_>) = samples.pixel_pairs().into_iter().unzip();
    let aff = g.affine_at_points(raw, params.point_decode(points.clone(), image_height, image_width))?;
    g.flow_loss(aff, points, targets)
}

/// Gradient descent with momentum and optional global-norm clipping.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, clip_norm: Option<f64>) -> Self {
        Self { lr, momentum, clip_norm, velocity: Vec::new() }
    }

    /// `v = momentum * v + g; w -= lr * v`.
    pub fn step(&mut self, params: &mut NetParams, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != params.blocks.len() {
            return Err(Error::Shape(format!("{} gradient blocks for {} parameter blocks", grads.len(), params.blocks.len())));
        }
        if self.velocity.is_empty() {
            self.velocity = params.blocks.iter().map(|b| vec![0.0; b.data.len()]).collect();
        }
        let norm = grads.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::TrainingAborted("non-finite gradient".into()));
        }
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for ((b, g), v) in params.blocks.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, gv), vv) in b.data.iter_mut().zip(g).zip(v.iter_mut()) {
                *vv = self.momentum * *vv + scale * gv;
                *w -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

/// Sums per-sample gradients in order, then divides by the count.
pub fn mean_grads(per_sample: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let Some(first) = per_sample.first() else { return Vec::new() };
    let mut acc: Vec<Vec<f64>> = first.iter().map(|b| vec![0.0; b.len()]).collect();
    for s in per_sample {
        for (a, b) in acc.iter_mut().zip(s) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
    let n = per_sample.len() as f64;
    for a in &mut acc {
        for x in a.iter_mut() {
            *x /= n;
        }
    }
    acc
}

#[derive(Debug, Clone)]
pub struct BlockCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub label: String,
    pub blocks: Vec<BlockCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    /// Names of blocks whose error reaches the tolerance.
    pub fn failures(&self) -> Vec<&str> {
        self.blocks.iter().filter(|b| b.max_rel_error >= self.tolerance).map(|b| b.name.as_str()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Coordinates perturbed per block; `None` perturbs all of them.
    pub max_per_block: Option<usize>,
    pub seed: u64,
    pub fault: Option<OpKind>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-4, tol: 1e-3, max_per_block: Some(24), seed: 0, fault: None }
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compares reverse-mode gradients of a scalar graph against central
/// differences. `build` records the loss from leaf nodes holding `leaves`
/// (leaf `k` is parameter index `k`).
pub fn grad_check<F>(label: &str, leaves: &[(String, Tensor4)], build: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor4], fault: Option<OpKind>| -> Result<(Graph, NodeId)> {
        let mut g = Graph::new();
        if let Some(k) = fault {
            g.inject_fault(k);
        }
        let ids: Vec<NodeId> = values.iter().enumerate().map(|(k, t)| g.param(k, t.clone())).collect();
        let out = build(&mut g, &ids)?;
        Ok((g, out))
    };
    let base: Vec<Tensor4> = leaves.iter().map(|(_, t)| t.clone()).collect();
    let (g, out) = eval(&base, cfg.fault)?;
    let analytic = g.backward(out)?;
    let scalar = |values: &[Tensor4]| -> Result<f64> {
        let (g, out) = eval(values, None)?;
        Ok(g.value(out).data[0])
    };
    let central = |values: &mut Vec<Tensor4>, k: usize, i: usize, eps: f64| -> Result<f64> {
        let orig = values[k].data[i];
        values[k].data[i] = orig + eps;
        let fp = scalar(values)?;
        values[k].data[i] = orig - eps;
        let fm = scalar(values)?;
        values[k].data[i] = orig;
        Ok((fp - fm) / (2.0 * eps))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut values = base.clone();
    let mut blocks = Vec::new();
    for (k, (name, t)) in leaves.iter().enumerate() {
        let grad = analytic.get(&k).cloned().unwrap_or_else(|| vec![0.0; t.len()]);
        let coords: Vec<usize> = match cfg.max_per_block {
            Some(m) if m < t.len() => (0..m).map(|_| rng.gen_range(0..t.len())).collect(),
            _ => (0..t.len()).collect(),
        };
        let mut worst: f64 = 0.0;
        for &i in &coords {
            let num = central(&mut values, k, i, cfg.eps)?;
            let mut err = rel_error(grad[i], num);
            if err >= cfg.tol {
                // A rectifier kink inside the stencil spoils the difference;
                // a much smaller step is kink-free almost surely.
                let fine = central(&mut values, k, i, cfg.eps * 1e-2)?;
                err = err.min(rel_error(grad[i], fine));
            }
            worst = worst.max(err);
        }
        blocks.push(BlockCheck { name: name.clone(), checked: coords.len(), max_rel_error: worst });
    }
    Ok(GradCheckReport { label: label.to_string(), blocks, tolerance: cfg.tol })
}

/// Gradient check of a regressor's flow loss on a toy volume and samples.
pub fn grad_check_regressor(
    params: &NetParams,
    input: &Tensor4,
    samples: &SampleSet,
    image_height: usize,
    image_width: usize,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let leaves: Vec<(String, Tensor4)> = params.blocks.iter().enumerate().map(|(i, b)| (b.name.clone(), params.tensor(i))).collect();
    let label = match params.arch {
        Arch::Grid { level } => format!("grid regressor level {level}"),
        Arch::Pixel => "pixel regressor".to_string(),
    };
    grad_check(
        &label,
        &leaves,
        |g, ids| {
            let x = g.input(input.clone());
            let raw = params.build_with_leaves(g, x, ids)?;
            record_loss(g, params, raw, samples, image_height, image_width)
        },
        cfg,
    )
}

fn random_tensor(dims: [usize; 4], rng: &mut ChaCha8Rng, scale: f64) -> Tensor4 {
    let n = dims.iter().product();
    Tensor4 { dims, data: (0..n).map(|_| rng.gen_range(-scale..scale)).collect() }
}

/// Contracts a node with a fixed random probe to give a scalar.
fn readout(g: &mut Graph, y: NodeId, rng: &mut ChaCha8Rng) -> Result<NodeId> {
    let f = g.value(y).len();
    let w = g.input(random_tensor([1, f, 1, 1], rng, 1.0));
    let b = g.input(Tensor4::zeros([1, 1, 1, 1]));
    g.dense(y, w, b)
}

fn random_samples(rng: &mut ChaCha8Rng, side: usize, stride: usize, count: usize) -> SampleSet {
    let samples = (0..count)
        .map(|_| crate::supervision::Sample {
            i: [rng.gen_range(0..side), rng.gen_range(0..side)],
            f: [rng.gen_range(0..side), rng.gen_range(0..side)],
        })
        .collect();
    SampleSet { level: 1, height: side, width: side, stride, samples }
}

/// Gradient checks of every layer type in isolation and of both regressors
/// at toy sizes.
pub fn gradcheck_suite(cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reports = Vec::new();
    let leaf = |name: &str, dims: [usize; 4], scale: f64, rng: &mut ChaCha8Rng| (name.to_string(), random_tensor(dims, rng, scale));

    for (stride, label) in [(1, "conv2d stride 1"), (2, "conv2d stride 2")] {
        let leaves = vec![
            leaf("x", [1, 3, 6, 5], 1.0, &mut rng),
            leaf("w", [4, 3, 3, 3], 1.0, &mut rng),
            leaf("b", [1, 4, 1, 1], 1.0, &mut rng),
        ];
        let seed = rng.gen();
        reports.push(grad_check(
            label,
            &leaves,
            |g, ids| {
                let y = g.conv2d(ids[0], ids[1], ids[2], stride, 1)?;
                readout(g, y, &mut ChaCha8Rng::seed_from_u64(seed))
            },
            cfg,
        )?);
    }
    type Unary = fn(&mut Graph, NodeId) -> Result<NodeId>;
    let unary: [(&str, [usize; 4], Unary); 3] = [
        ("relu", [1, 2, 4, 4], |g, x| Ok(g.relu(x))),
        ("avg_pool", [1, 2, 5, 7], |g, x| g.avg_pool(x, 2, 3)),
        ("upsample", [1, 2, 3, 4], |g, x| g.upsample(x, 7, 9)),
    ];
    for (label, dims, op) in unary {
        let leaves = vec![leaf("x", dims, 1.0, &mut rng)];
        let seed = rng.gen();
        reports.push(grad_check(
            label,
            &leaves,
            |g, ids| {
                let y = op(g, ids[0])?;
                readout(g, y, &mut ChaCha8Rng::seed_from_u64(seed))
            },
            cfg,
        )?);
    }
    let leaves = vec![
        leaf("x", [1, 3, 2, 2], 1.0, &mut rng),
        leaf("w", [5, 12, 1, 1], 1.0, &mut rng),
        leaf("b", [1, 5, 1, 1], 1.0, &mut rng),
    ];
    let seed = rng.gen();
    reports.push(grad_check(
        "dense",
        &leaves,
        |g, ids| {
            let y = g.dense(ids[0], ids[1], ids[2])?;
            readout(g, y, &mut ChaCha8Rng::seed_from_u64(seed))
        },
        cfg,
    )?);
    let leaves = vec![leaf("a", [1, 2, 3, 3], 1.0, &mut rng), leaf("b", [1, 3, 3, 3], 1.0, &mut rng)];
    let seed = rng.gen();
    reports.push(grad_check(
        "concat",
        &leaves,
        |g, ids| {
            let y = g.concat(ids[0], ids[1])?;
            readout(g, y, &mut ChaCha8Rng::seed_from_u64(seed))
        },
        cfg,
    )?);

    let points: Vec<[f64; 2]> = (0..7).map(|_| [rng.gen_range(0.0..15.0), rng.gen_range(0.0..15.0)]).collect();
    let targets: Vec<[f64; 2]> = points.iter().map(|p| [p[0] + rng.gen_range(-2.0..2.0), p[1] + rng.gen_range(-2.0..2.0)]).collect();
    let decode = PointDecode { points: points.clone(), image_height: 16, image_width: 16, translation_scale: [16.0, 16.0] };
    let leaves = vec![leaf("raw", [1, 6, 2, 2], 0.1, &mut rng)];
    reports.push(grad_check(
        "affine_at_points + flow_loss",
        &leaves,
        |g, ids| {
            let a = g.affine_at_points(ids[0], decode.clone())?;
            g.flow_loss(a, points.clone(), targets.clone())
        },
        cfg,
    )?);
    let near_identity = |rng: &mut ChaCha8Rng, m: usize| {
        let mut t = random_tensor([1, 6, m, 1], rng, 0.1);
        for k in 0..m {
            t.data[k] += 1.0;
            t.data[4 * m + k] += 1.0;
        }
        t
    };
    let leaves = vec![
        ("outer".to_string(), near_identity(&mut rng, points.len())),
        ("inner".to_string(), near_identity(&mut rng, points.len())),
    ];
    reports.push(grad_check(
        "compose",
        &leaves,
        |g, ids| {
            let c = g.compose(ids[0], ids[1])?;
            g.flow_loss(c, points.clone(), targets.clone())
        },
        cfg,
    )?);
    let mut field = random_tensor([1, 6, 6, 6], &mut rng, 0.05);
    for k in 0..36 {
        field.data[k] += 1.0;
        field.data[4 * 36 + k] += 1.0;
        field.data[2 * 36 + k] += 0.37;
        field.data[5 * 36 + k] -= 0.21;
    }
    let leaves = vec![leaf("image", [1, 2, 6, 6], 1.0, &mut rng), ("field".to_string(), field)];
    let seed = rng.gen();
    reports.push(grad_check(
        "warp",
        &leaves,
        |g, ids| {
            let y = g.warp(ids[0], ids[1])?;
            readout(g, y, &mut ChaCha8Rng::seed_from_u64(seed))
        },
        cfg,
    )?);

    for level in [1, 2] {
        let mut params = NetParams::grid(level, 9, rng.gen())?;
        params.randomize_head(rng.gen(), 0.05);
        let input = random_tensor([1, 9, 16, 16], &mut rng, 1.0).map_abs();
        let samples = random_samples(&mut rng, 16, 2, 12);
        reports.push(grad_check_regressor(&params, &input, &samples, 32, 32, cfg)?);
    }
    let mut params = NetParams::pixel(9, rng.gen());
    params.randomize_head(rng.gen(), 0.05);
    let input = random_tensor([1, 9, 8, 8], &mut rng, 1.0).map_abs();
    let samples = random_samples(&mut rng, 8, 2, 10);
    reports.push(grad_check_regressor(&params, &input, &samples, 16, 16, cfg)?);
    Ok(reports)
}

impl Tensor4 {
    fn map_abs(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.abs());
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost_volume::CostVolume;
    use crate::supervision::Sample;

    fn random_volume(rng: &mut ChaCha8Rng, h: usize, w: usize, radius: usize) -> CostVolume {
        let side = 2 * radius + 1;
        CostVolume { height: h, width: w, radius, scores: (0..h * w * side * side).map(|_| rng.gen_range(0.0..1.0)).collect() }
    }

    /// Straight-line forward pass over nested loops, independent of the
    /// im2col path.
    fn conv_oracle(x: &[f64], c: usize, h: usize, w: usize, wt: &ParamBlock, b: &ParamBlock, stride: usize, pad: usize) -> (Vec<f64>, usize, usize) {
        let (co, k) = (wt.shape[0], wt.shape[2]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; co * oh * ow];
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data[o];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += wt.data[((o * c + ci) * k + ky) * k + kx] * x[(ci * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        (out, oh, ow)
    }

    fn relu(v: Vec<f64>) -> Vec<f64> {
        v.into_iter().map(|a| a.max(0.0)).collect()
    }

    /// Adaptive average pooling with floor/ceil bin edges.
    fn pool_oracle(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                let (y0, y1) = (oy * h / oh, ((oy + 1) * h).div_ceil(oh));
                for ox in 0..ow {
                    let (x0, x1) = (ox * w / ow, ((ox + 1) * w).div_ceil(ow));
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            acc += x[(ch * h + y) * w + xx];
                        }
                    }
                    out[(ch * oh + oy) * ow + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        out
    }

    fn block<'a>(p: &'a NetParams, name: &str) -> &'a ParamBlock {
        &p.blocks[p.block_index(name).unwrap()]
    }

    #[test]
    fn grid_forward_matches_layer_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = NetParams::grid(1, 9, 7).unwrap();
        p.randomize_head(8, 0.1);
        let c = random_volume(&mut rng, 16, 16, 1);
        let input = volume_tensor(&c);
        let got = p.forward_raw(&input).unwrap();

        let mut x = pool_oracle(&input.data, 9, 16, 16, 8, 8);
        let (mut ch, mut h, mut w) = (9, 8, 8);
        for (n, stride) in [1, 2, 1, 2].into_iter().enumerate() {
            let (y, oh, ow) = conv_oracle(&x, ch, h, w, block(&p, &format!("conv{n}.w")), block(&p, &format!("conv{n}.b")), stride, 1);
            x = relu(y);
            ch = GRID_WIDTHS[n];
            (h, w) = (oh, ow);
        }
        let pooled = pool_oracle(&x, ch, h, w, 4, 4);
        let (head, oh, ow) = conv_oracle(&pooled, ch, 4, 4, block(&p, "head.w"), block(&p, "head.b"), 4, 0);
        assert_eq!((oh, ow), (1, 1));
        assert_eq!(got.dims, [1, 6, 1, 1]);
        for (a, b) in got.data.iter().zip(&head) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn pixel_forward_matches_layer_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = NetParams::pixel(9, 3);
        p.randomize_head(4, 0.1);
        let c = random_volume(&mut rng, 8, 8, 1);
        let input = volume_tensor(&c);
        let got = p.forward_raw(&input).unwrap();
        let conv = |x: &[f64], ch, h, w, name: &str, stride| {
            let (y, oh, ow) = conv_oracle(x, ch, h, w, block(&p, &format!("{name}.w")), block(&p, &format!("{name}.b")), stride, 1);
            (relu(y), oh, ow)
        };
        // Bilinear upsampling with half-pixel centres and clamped borders.
        let up = |x: &[f64], ch: usize, h: usize, w: usize, oh: usize, ow: usize| {
            let mut out = vec![0.0; ch * oh * ow];
            for c in 0..ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let sy = ((oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
                        let sx = ((ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                        let at = |yy: usize, xx: usize| x_get(x, c, h, w, yy, xx);
                        out[(c * oh + oy) * ow + ox] = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
                    }
                }
            }
            out
        };
        let (e0, _, _) = conv(&input.data, 9, 8, 8, "enc0", 1);
        let (e1, _, _) = conv(&e0, 32, 8, 8, "enc1", 2);
        let (e2, _, _) = conv(&e1, 32, 4, 4, "enc2", 2);
        let mut c1 = up(&e2, 64, 2, 2, 4, 4);
        c1.extend_from_slice(&e1);
        let (d1, _, _) = conv(&c1, 96, 4, 4, "dec1", 1);
        let mut c0 = up(&d1, 32, 4, 4, 8, 8);
        c0.extend_from_slice(&e0);
        let (d0, _, _) = conv(&c0, 64, 8, 8, "dec0", 1);
        let (head, _, _) = conv_oracle(&d0, 32, 8, 8, block(&p, "head.w"), block(&p, "head.b"), 1, 0);
        assert_eq!(got.dims, [1, 6, 8, 8]);
        for (a, b) in got.data.iter().zip(&head) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    fn x_get(x: &[f64], c: usize, h: usize, w: usize, y: usize, xx: usize) -> f64 {
        x[(c * h + y) * w + xx]
    }

    #[test]
    fn zero_head_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = random_volume(&mut rng, 16, 16, 1);
        for level in [1, 2, 3] {
            let p = NetParams::grid(level, 9, level as u64).unwrap();
            let f = forward_grid(&p, &c, 32, 32).unwrap();
            assert_eq!(f.side(), 1 << (level - 1));
            assert!(f.cells.iter().all(|t| *t == Affine2D::identity()));
        }
        let p = NetParams::pixel(9, 1);
        assert!(forward_pixel(&p, &c, 32, 32).unwrap().is_identity());
    }

    #[test]
    fn head_bias_translates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = random_volume(&mut rng, 16, 16, 1);
        let mut p = NetParams::grid(2, 9, 0).unwrap();
        p.translation_scale = TranslationScale::Unit;
        p.block_mut("head.b").unwrap().data = vec![0.0, 0.0, 2.0, 0.0, 0.0, 0.0];
        let f = forward_grid(&p, &c, 32, 32).unwrap();
        assert!(f.cells.iter().all(|t| t.max_abs_diff(&Affine2D::translation(2.0, 0.0)) < 1e-12));
        // Default scaling: raw translations are fractions of the image size.
        let mut p = NetParams::pixel(9, 0);
        p.block_mut("head.b").unwrap().data = vec![0.0, 0.0, 0.25, 0.0, 0.0, -0.5];
        let f = forward_pixel(&p, &c, 32, 32).unwrap();
        assert!(f.cells.iter().all(|t| t.max_abs_diff(&Affine2D::translation(8.0, -16.0)) < 1e-12));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = random_volume(&mut rng, 16, 16, 2);
        let p = NetParams::grid(1, 9, 0).unwrap();
        assert!(matches!(forward_grid(&p, &c, 32, 32), Err(Error::Shape(_))));
        assert!(forward_pixel(&p, &c, 32, 32).is_err());
        let odd = random_volume(&mut rng, 10, 10, 1);
        assert!(forward_pixel(&NetParams::pixel(9, 0), &odd, 20, 20).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut p = NetParams::grid(2, 25, u64::MAX - 3).unwrap();
        p.randomize_head(1, 0.3);
        p.translation_scale = TranslationScale::Unit;
        let bytes = p.encode().unwrap();
        let q = NetParams::decode(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(q.encode().unwrap(), bytes);
        let px = NetParams::pixel(9, 12);
        assert_eq!(NetParams::decode(&px.encode().unwrap()).unwrap(), px);
        let mut blocks = p.to_blocks();
        blocks[2].shape[0] += 1;
        assert!(NetParams::from_blocks(blocks).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        assert_eq!(NetParams::grid(1, 9, 5).unwrap(), NetParams::grid(1, 9, 5).unwrap());
        assert_ne!(NetParams::grid(1, 9, 5).unwrap(), NetParams::grid(1, 9, 6).unwrap());
    }

    #[test]
    fn loss_flow_cases() {
        let samples = SampleSet { level: 1, height: 8, width: 8, stride: 1, samples: vec![Sample { i: [0, 0], f: [3, 4] }] };
        let id = AffineField::identity(8, 8);
        assert_eq!(loss_flow(&id, &samples).unwrap(), 25.0);
        let exact = AffineField::constant(8, 8, Affine2D::translation(3.0, 4.0));
        assert_eq!(loss_flow(&exact, &samples).unwrap(), 0.0);
        let half = AffineField::constant(8, 8, Affine2D::translation(1.5, 2.0));
        let double = AffineField::constant(8, 8, Affine2D::translation(-3.0, -4.0));
        let (a, b) = (loss_flow(&half, &samples).unwrap(), loss_flow(&double, &samples).unwrap());
        assert!((b - 16.0 * a).abs() < 1e-12);
        let empty = SampleSet { samples: vec![], ..samples };
        assert!(matches!(loss_flow(&id, &empty), Err(Error::EmptySamples)));
    }

    #[test]
    fn sgd_momentum_update() {
        let mut p = NetParams::grid(1, 1, 0).unwrap();
        let before = p.clone();
        let g: Vec<Vec<f64>> = p.blocks.iter().map(|b| vec![1.0; b.data.len()]).collect();
        let mut opt = Sgd::new(0.1, 0.5, None);
        opt.step(&mut p, &g).unwrap();
        opt.step(&mut p, &g).unwrap();
        // v1 = 1, v2 = 1.5; total step 0.25.
        for (a, b) in before.blocks.iter().zip(&p.blocks) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - 0.25 - y).abs() < 1e-12);
            }
        }
        let mut bad = g.clone();
        bad[0][0] = f64::NAN;
        assert!(opt.step(&mut p, &bad).is_err());
    }

    #[test]
    fn clipping_bounds_the_step() {
        let mut p = NetParams::grid(1, 1, 0).unwrap();
        let before = p.clone();
        let g: Vec<Vec<f64>> = p.blocks.iter().map(|b| vec![100.0; b.data.len()]).collect();
        Sgd::new(1.0, 0.0, Some(2.0)).step(&mut p, &g).unwrap();
        let moved: f64 = before.blocks.iter().zip(&p.blocks).flat_map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2))).sum();
        assert!((moved.sqrt() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn stock_suite_passes() {
        for r in gradcheck_suite(&GradCheckConfig::default()).unwrap() {
            assert!(r.passed(), "{}: {:?}", r.label, r.blocks);
        }
    }

    #[test]
    fn corrupted_rule_is_named() {
        let cfg = GradCheckConfig { fault: Some(OpKind::Conv2d), ..Default::default() };
        let reports = gradcheck_suite(&cfg).unwrap();
        let conv = reports.iter().find(|r| r.label == "conv2d stride 1").unwrap();
        assert!(!conv.passed());
        let grid = reports.iter().find(|r| r.label == "grid regressor level 1").unwrap();
        assert!(grid.failures().iter().any(|n| n.starts_with("conv")));
        // Layers without convolutions are unaffected.
        assert!(reports.iter().find(|r| r.label == "relu").unwrap().passed());
    }
}
