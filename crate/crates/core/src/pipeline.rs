//! Coarse-to-fine inference and the sequential training protocol.
//!
//! Stage `s` in `1..=K` is a grid level, stage `K + 1` the pixel level.
//! Every stage warps the source by the composition of all earlier stages,
//! builds a cost volume against the target and regresses a residual field.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Graph, NodeId};
use crate::cost_volume::{build_constrained, window_radius, CostVolume};
use crate::error::{Error, Result};
use crate::features::{extract_handcrafted, DescriptorMap, LevelSpec};
use crate::geometry::{warp_image, Affine2D, AffineField};
use crate::image::Image;
use crate::net::{forward_grid, forward_pixel, mean_grads, record_loss, volume_tensor, NetParams, Sgd};
use crate::supervision::{generate_samples, msac_affine, MsacConfig, ObjectMask, SampleSet, SAMPLE_FLOOR};
use crate::synth::{draw_affine, warp_mask, AffineRanges, TrainingPair};

/// Hyperparameters of the training protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub msac_iterations: usize,
    pub msac_threshold_px: f64,
    /// Level-1 pairs whose MSAC inlier ratio falls below this are dropped.
    pub min_inlier_ratio: f64,
    /// Draw a fresh random view of a training pair for every batch item.
    pub augment: bool,
    pub finetune_iterations: usize,
    pub finetune_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 8,
            lr: 1e-3,
            momentum: 0.9,
            clip_norm: Some(1.0),
            seed: 0,
            msac_iterations: 500,
            msac_threshold_px: 2.0,
            min_inlier_ratio: 0.25,
            augment: true,
            finetune_iterations: 200,
            finetune_lr: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidConfig {
    /// Number of grid levels.
    pub k: u32,
    /// Search-window ratio per stage, `k + 1` entries.
    pub window_ratios: Vec<f64>,
    /// Descriptor pooling scales per stage, `k + 1` entries.
    pub scale_indices: Vec<Vec<u32>>,
    /// Feature grid stride in image pixels.
    pub stride: usize,
    pub train: TrainConfig,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            k: 3,
            window_ratios: vec![1.0 / 10.0, 1.0 / 10.0, 1.0 / 15.0, 1.0 / 15.0],
            scale_indices: vec![vec![2, 1], vec![2, 1], vec![1, 0], vec![1, 0]],
            stride: 2,
            train: TrainConfig::default(),
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        let stages = self.k as usize + 1;
        if self.k == 0 {
            return Err(Error::InvalidInput("pyramid needs at least one grid level".into()));
        }
        if self.window_ratios.len() != stages {
            return Err(Error::InvalidInput(format!(
                "{} window ratios for {} stages",
                self.window_ratios.len(),
                stages
            )));
        }
        if self.scale_indices.len() != stages {
            return Err(Error::InvalidInput(format!(
                "{} scale lists for {} stages",
                self.scale_indices.len(),
                stages
            )));
        }
        if self.stride == 0 {
            return Err(Error::InvalidInput("stride must be at least 1".into()));
        }
        for s in 1..=stages as u32 {
            self.level_spec(s)?;
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::InvalidInput("batch size must be at least 1".into()));
        }
        if !(t.lr > 0.0 && t.lr.is_finite() && t.finetune_lr > 0.0 && t.finetune_lr.is_finite()) {
            return Err(Error::InvalidInput("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::InvalidInput(format!("momentum {} outside [0, 1)", t.momentum)));
        }
        if t.clip_norm.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return Err(Error::InvalidInput("clip norm must be positive".into()));
        }
        if !(t.msac_threshold_px > 0.0) || t.msac_iterations == 0 {
            return Err(Error::InvalidInput("msac needs iterations and a positive threshold".into()));
        }
        Ok(())
    }

    pub fn stages(&self) -> u32 {
        self.k + 1
    }

    /// Descriptor and window settings of stage `s` (1-based).
    pub fn level_spec(&self, stage: u32) -> Result<LevelSpec> {
        let idx = stage
            .checked_sub(1)
            .filter(|&i| (i as usize) < self.window_ratios.len().min(self.scale_indices.len()))
            .ok_or_else(|| Error::InvalidInput(format!("stage {stage} outside the pyramid")))?
            as usize;
        LevelSpec::new(stage, self.scale_indices[idx].clone(), self.window_ratios[idx])
    }

    /// Cost-volume channel count of a stage on an image of the given size.
    pub fn stage_channels(&self, stage: u32, height: usize, width: usize) -> Result<usize> {
        let spec = self.level_spec(stage)?;
        let r = window_radius(spec.window_ratio, height / self.stride, width / self.stride);
        Ok((2 * r + 1) * (2 * r + 1))
    }

    fn msac(&self, seed: u64) -> MsacConfig {
        MsacConfig {
            iterations: self.train.msac_iterations,
            inlier_threshold_px: self.train.msac_threshold_px,
            seed,
        }
    }
}

/// Regressors of every stage.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidParams {
    pub grids: Vec<NetParams>,
    pub pixel: NetParams,
}

impl PyramidParams {
    /// Zero-head regressors for images of the given size; the pyramid is then
    /// an exact identity.
    pub fn identity(config: &PyramidConfig, height: usize, width: usize) -> Result<Self> {
        config.validate()?;
        let seed = config.train.seed;
        let grids = (1..=config.k)
            .map(|k| NetParams::grid(k, config.stage_channels(k, height, width)?, seed.wrapping_add(u64::from(k))))
            .collect::<Result<Vec<_>>>()?;
        let stage = config.stages();
        let pixel = NetParams::pixel(config.stage_channels(stage, height, width)?, seed.wrapping_add(u64::from(stage)));
        Ok(Self { grids, pixel })
    }

    pub fn check(&self, config: &PyramidConfig) -> Result<()> {
        if self.grids.len() != config.k as usize {
            return Err(Error::InvalidInput(format!(
                "config has {} grid levels, parameters have {}",
                config.k,
                self.grids.len()
            )));
        }
        for (n, g) in self.grids.iter().enumerate() {
            if g.level() != Some(n as u32 + 1) {
                return Err(Error::InvalidInput(format!("parameters at position {} are not level {}", n, n + 1)));
            }
        }
        if self.pixel.level().is_some() {
            return Err(Error::InvalidInput("last regressor must be pixel-level".into()));
        }
        Ok(())
    }

    /// Regressor of stage `s` (1-based).
    pub fn stage(&self, s: u32) -> &NetParams {
        self.grids.get(s as usize - 1).unwrap_or(&self.pixel)
    }

    fn stage_mut(&mut self, s: u32) -> &mut NetParams {
        let n = self.grids.len();
        if (s as usize) <= n {
            &mut self.grids[s as usize - 1]
        } else {
            &mut self.pixel
        }
    }
}

/// Output of [`run_inference`].
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    /// Final composed field `T*`.
    pub field: AffineField,
    /// Residual field regressed at each stage, grid levels then pixel level.
    pub level_fields: Vec<AffineField>,
    /// Composition of stages `1..=s` for each stage `s`.
    pub composed: Vec<AffineField>,
}

fn check_pair(source: &Image, target: &Image) -> Result<()> {
    if source.height != target.height || source.width != target.width || source.channels != target.channels {
        return Err(Error::Shape(format!(
            "source {}x{}x{} vs target {}x{}x{}",
            source.height, source.width, source.channels, target.height, target.width, target.channels
        )));
    }
    Ok(())
}

/// Descriptors of an image on the feature grid.
pub fn grid_features(img: &Image, spec: &LevelSpec, stride: usize) -> Result<DescriptorMap> {
    extract_handcrafted(&img.downsample(stride)?, spec)
}

/// Cost volume of stage `s` between a (warped) source and the target.
pub fn stage_volume(config: &PyramidConfig, stage: u32, source: &Image, target: &Image) -> Result<CostVolume> {
    let spec = config.level_spec(stage)?;
    let fs = grid_features(source, &spec, config.stride)?;
    let ft = grid_features(target, &spec, config.stride)?;
    build_constrained(&fs, &ft, spec.window_ratio)
}

fn warp_source(source: &Image, field: &AffineField) -> Result<Image> {
    if field.is_identity() {
        Ok(source.clone())
    } else {
        warp_image(source, field)
    }
}

/// Residual field of one stage from its cost volume.
fn regress(params: &NetParams, c: &CostVolume, height: usize, width: usize) -> Result<AffineField> {
    match params.level() {
        Some(_) => Ok(forward_grid(params, c, height, width)?.to_dense()),
        None => forward_pixel(params, c, height, width),
    }
}

/// Per-pixel product of two fields, `outer` applied last.
fn compose_pair(outer: &AffineField, inner: &AffineField) -> AffineField {
    let cells = outer.cells.iter().zip(&inner.cells).map(|(o, i)| o.compose(i)).collect();
    AffineField { height: outer.height, width: outer.width, cells }
}

/// Runs stages `1..=last`, returning per-stage volumes alongside the fields.
fn run_stages(
    source: &Image,
    target: &Image,
    config: &PyramidConfig,
    params: &PyramidParams,
    last: u32,
) -> Result<(Inference, Vec<CostVolume>)> {
    config.validate()?;
    params.check(config)?;
    check_pair(source, target)?;
    let (h, w) = (target.height, target.width);
    let mut acc = AffineField::identity(h, w);
    let mut out = Inference { field: acc.clone(), level_fields: Vec::new(), composed: Vec::new() };
    let mut volumes = Vec::new();
    for s in 1..=last {
        let warped = warp_source(source, &acc)?;
        let c = stage_volume(config, s, &warped, target)?;
        let t = regress(params.stage(s), &c, h, w)?;
        acc = compose_pair(&acc, &t);
        out.level_fields.push(t);
        out.composed.push(acc.clone());
        volumes.push(c);
    }
    out.field = acc;
    Ok((out, volumes))
}

/// Full coarse-to-fine estimate of the field mapping target pixels to the
/// source.
pub fn run_inference(source: &Image, target: &Image, config: &PyramidConfig, params: &PyramidParams) -> Result<Inference> {
    Ok(run_stages(source, target, config, params, config.stages())?.0)
}

/// Why a training pair contributed nothing at a stage.
#[derive(Debug, Clone, PartialEq)]
pub enum SkipReason {
    TooFewSamples(usize),
    LowInlierRatio(f64),
    EmptyMask,
    Degenerate(String),
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SkipReason::TooFewSamples(n) => write!(f, "{n} samples, below the floor of {SAMPLE_FLOOR}"),
            SkipReason::LowInlierRatio(r) => write!(f, "msac inlier ratio {r:.3}"),
            SkipReason::EmptyMask => write!(f, "object mask left the image"),
            SkipReason::Degenerate(m) => write!(f, "{m}"),
        }
    }
}

/// Cost volumes and supervision of one training example.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// Volumes of stages `1..=stage`.
    pub volumes: Vec<CostVolume>,
    /// Samples from the last volume, in that stage's warped frame.
    pub samples: SampleSet,
    /// Composition of the stages before the last one.
    pub lower: AffineField,
}

fn grid_mask(pair: &TrainingPair, stride: usize) -> Result<Option<ObjectMask>> {
    pair.target_mask.as_ref().map(|m| m.downsample(stride)).transpose()
}

/// Builds the stage-`stage` volume with frozen lower stages and generates its
/// samples. Level 1 keeps only the MSAC inliers.
pub fn prepare_stage(
    pair: &TrainingPair,
    config: &PyramidConfig,
    params: &PyramidParams,
    stage: u32,
    msac_seed: u64,
) -> Result<std::result::Result<Prepared, SkipReason>> {
    pair.validate()?;
    let (inf, volumes) = run_stages(&pair.source, &pair.target, config, params, stage)?;
    let lower = if stage >= 2 { inf.composed[stage as usize - 2].clone() } else { AffineField::identity(pair.target.height, pair.target.width) };
    let c = volumes.last().expect("at least one stage");
    let mask = grid_mask(pair, config.stride)?;
    let mut samples = generate_samples(c, mask.as_ref(), stage, config.stride)?;
    if samples.len() < SAMPLE_FLOOR {
        return Ok(Err(SkipReason::TooFewSamples(samples.len())));
    }
    if stage == 1 {
        let fit = match msac_affine(&samples, &config.msac(msac_seed)) {
            Ok(fit) => fit,
            Err(Error::Degenerate(m)) => return Ok(Err(SkipReason::Degenerate(m))),
            Err(e) => return Err(e),
        };
        let ratio = fit.inlier_ratio(samples.len());
        if ratio < config.train.min_inlier_ratio {
            return Ok(Err(SkipReason::LowInlierRatio(ratio)));
        }
        samples = fit.inliers;
        if samples.len() < SAMPLE_FLOOR {
            return Ok(Err(SkipReason::TooFewSamples(samples.len())));
        }
    }
    Ok(Ok(Prepared { volumes, samples, lower }))
}

const AUG_VIEW: AffineRanges = AffineRanges {
    max_rotation_deg: 15.0,
    scale: (0.9, 1.1),
    max_shear: 0.0,
    max_translation: 0.06,
};
const AUG_EXTRA: AffineRanges = AffineRanges {
    max_rotation_deg: 5.0,
    scale: (0.95, 1.05),
    max_shear: 0.03,
    max_translation: 0.02,
};

/// Random view of a pair: the source is resampled through `R` and the target
/// through `R * A`, with `R` optionally mirrored. The ground truth is dropped.
pub fn augment_pair(pair: &TrainingPair, rng: &mut impl Rng) -> Result<Option<TrainingPair>> {
    let (h, w) = (pair.target.height, pair.target.width);
    let center = [(w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0];
    let side = h.max(w) as f64;
    let mut r = draw_affine(rng, &AUG_VIEW, center, side);
    if rng.gen_bool(0.5) {
        r = r.compose(&Affine2D::new(-1.0, 0.0, w as f64 - 1.0, 0.0, 1.0, 0.0));
    }
    let ra = r.compose(&draw_affine(rng, &AUG_EXTRA, center, side));
    let rs = AffineField::constant(pair.source.height, pair.source.width, r);
    let rt = AffineField::constant(h, w, ra);
    let warp_m = |m: &Option<ObjectMask>, f: &AffineField| -> Result<Option<Option<ObjectMask>>> {
        match m {
            None => Ok(Some(None)),
            Some(m) => Ok(warp_mask(m, f)?.map(Some)),
        }
    };
    let (Some(source_mask), Some(target_mask)) = (warp_m(&pair.source_mask, &rs)?, warp_m(&pair.target_mask, &rt)?) else {
        return Ok(None);
    };
    Ok(Some(TrainingPair {
        source: warp_image(&pair.source, &rs)?,
        target: warp_image(&pair.target, &rt)?,
        source_mask,
        target_mask,
        gt_field: None,
    }))
}

/// Training summary of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub stage: u32,
    /// `(iteration, mean batch loss)` in px^2.
    pub loss_curve: Vec<(usize, f64)>,
    /// Pairs that produced usable supervision (fixed datasets only).
    pub pairs_used: usize,
    /// `(pair index, reason)` for pairs dropped before training.
    pub skipped: Vec<(usize, SkipReason)>,
}

/// Source of training examples for one stage.
enum Examples {
    Fixed(Vec<Prepared>),
    Augmented,
}

fn prepare_fixed(
    dataset: &[TrainingPair],
    config: &PyramidConfig,
    params: &PyramidParams,
    stage: u32,
) -> Result<(Vec<Prepared>, Vec<(usize, SkipReason)>)> {
    let seed = config.train.seed;
    let results: Vec<_> = dataset
        .par_iter()
        .enumerate()
        .map(|(n, p)| prepare_stage(p, config, params, stage, seed ^ (n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
        .collect::<Result<_>>()?;
    let mut kept = Vec::new();
    let mut skipped = Vec::new();
    for (n, r) in results.into_iter().enumerate() {
        match r {
            Ok(p) => kept.push(p),
            Err(reason) => skipped.push((n, reason)),
        }
    }
    Ok((kept, skipped))
}

fn abort_message(stage: u32, total: usize, skipped: &[(usize, SkipReason)]) -> String {
    let mut msg = format!("stage {stage}: no usable pairs out of {total}");
    for (n, r) in skipped.iter().take(8) {
        msg.push_str(&format!("; pair {n}: {r}"));
    }
    msg
}

/// Draws a batch of augmented examples. Candidates are drawn sequentially and
/// prepared in parallel, so the result does not depend on the thread count.
fn draw_batch(
    dataset: &[TrainingPair],
    config: &PyramidConfig,
    params: &PyramidParams,
    stage: u32,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Prepared>> {
    let want = config.train.batch_size;
    let mut batch = Vec::with_capacity(want);
    for _round in 0..20 {
        let seeds: Vec<(usize, u64)> = (0..want - batch.len()).map(|_| (rng.gen_range(0..dataset.len()), rng.gen())).collect();
        let drawn: Vec<Option<Prepared>> = seeds
            .par_iter()
            .map(|&(n, seed)| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let Some(view) = augment_pair(&dataset[n], &mut r)? else { return Ok(None) };
                Ok(prepare_stage(&view, config, params, stage, seed)?.ok())
            })
            .collect::<Result<_>>()?;
        batch.extend(drawn.into_iter().flatten());
        if batch.len() == want {
            return Ok(batch);
        }
    }
    Err(Error::TrainingAborted(format!(
        "stage {stage}: augmented views keep falling below the sample floor"
    )))
}

/// Loss and per-block gradients of one stage regressor on one example.
fn example_grad(params: &NetParams, ex: &Prepared, height: usize, width: usize) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let x = g.input(volume_tensor(ex.volumes.last().expect("volume")));
    let raw = params.build(&mut g, x, 0)?;
    let loss = record_loss(&mut g, params, raw, &ex.samples, height, width)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).data[0], params.collect_grads(&grads, 0)))
}

fn image_dims(dataset: &[TrainingPair]) -> Result<(usize, usize)> {
    let first = dataset.first().ok_or_else(|| Error::TrainingAborted("empty dataset".into()))?;
    let (h, w) = (first.target.height, first.target.width);
    if dataset.iter().any(|p| p.target.height != h || p.target.width != w) {
        return Err(Error::Shape("training images must share one size".into()));
    }
    Ok((h, w))
}

fn batch_indices(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    if batch >= n {
        (0..n).collect()
    } else {
        rand::seq::index::sample(rng, n, batch).into_vec()
    }
}

/// Trains the regressor of stage `stage` with all other stages frozen.
/// Grid levels are `1..=K`, the pixel level is `K + 1`.
pub fn train_stage(
    stage: u32,
    dataset: &[TrainingPair],
    config: &PyramidConfig,
    params: &mut PyramidParams,
) -> Result<TrainReport> {
    config.validate()?;
    params.check(config)?;
    if stage == 0 || stage > config.stages() {
        return Err(Error::InvalidInput(format!("stage {stage} outside the pyramid")));
    }
    let (h, w) = image_dims(dataset)?;
    let t = &config.train;
    let (examples, skipped) = if t.augment {
        (Examples::Augmented, Vec::new())
    } else {
        let (kept, skipped) = prepare_fixed(dataset, config, params, stage)?;
        if kept.is_empty() {
            return Err(Error::TrainingAborted(abort_message(stage, dataset.len(), &skipped)));
        }
        (Examples::Fixed(kept), skipped)
    };
    let pairs_used = match &examples {
        Examples::Fixed(v) => v.len(),
        Examples::Augmented => dataset.len(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed ^ (u64::from(stage) << 56));
    let mut sgd = Sgd::new(t.lr, t.momentum, t.clip_norm);
    let mut curve = Vec::with_capacity(t.iterations);
    for it in 0..t.iterations {
        let drawn;
        let batch: Vec<&Prepared> = match &examples {
            Examples::Fixed(v) => batch_indices(&mut rng, v.len(), t.batch_size).into_iter().map(|i| &v[i]).collect(),
            Examples::Augmented => {
                drawn = draw_batch(dataset, config, params, stage, &mut rng)?;
                drawn.iter().collect()
            }
        };
        let net = params.stage(stage);
        let results: Vec<(f64, Vec<Vec<f64>>)> =
            batch.par_iter().map(|ex| example_grad(net, ex, h, w)).collect::<Result<_>>()?;
        let loss = results.iter().map(|r| r.0).sum::<f64>() / results.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: it });
        }
        let grads: Vec<Vec<Vec<f64>>> = results.into_iter().map(|r| r.1).collect();
        sgd.step(params.stage_mut(stage), &mean_grads(&grads))?;
        curve.push((it, loss));
    }
    Ok(TrainReport { stage, loss_curve: curve, pairs_used, skipped })
}

/// Sequential protocol: grid levels `1..=K`, then the pixel level.
pub fn train_pyramid(dataset: &[TrainingPair], config: &PyramidConfig, params: &mut PyramidParams) -> Result<Vec<TrainReport>> {
    (1..=config.stages()).map(|s| train_stage(s, dataset, config, params)).collect()
}

/// Supervision for end-to-end finetuning: pixel-level samples mapped back to
/// the original source through the frozen composition of the grid levels.
struct FinetuneExample {
    volumes: Vec<CostVolume>,
    points: Vec<[f64; 2]>,
    targets: Vec<[f64; 2]>,
}

fn finetune_example(pair: &TrainingPair, config: &PyramidConfig, params: &PyramidParams) -> Result<Option<FinetuneExample>> {
    let prep = match prepare_stage(pair, config, params, config.stages(), 0)? {
        Ok(p) => p,
        Err(_) => return Ok(None),
    };
    let (points, targets) = prep
        .samples
        .pixel_pairs()
        .into_iter()
        .map(|(p, q)| (p, prep.lower.sample(q[0], q[1]).apply(q)))
        .unzip();
    Ok(Some(FinetuneExample { volumes: prep.volumes, points, targets }))
}

/// Loss of the composed field at the sample points, recorded for all stages.
fn finetune_grad(
    params: &PyramidParams,
    ex: &FinetuneExample,
    height: usize,
    width: usize,
) -> Result<(f64, Vec<Vec<Vec<f64>>>)> {
    let mut g = Graph::new();
    let mut offsets = Vec::new();
    let mut offset = 0;
    let mut acc: Option<NodeId> = None;
    for (n, c) in ex.volumes.iter().enumerate() {
        let net = params.stage(n as u32 + 1);
        let x = g.input(volume_tensor(c));
        let raw = net.build(&mut g, x, offset)?;
        let aff = g.affine_at_points(raw, net.point_decode(ex.points.clone(), height, width))?;
        acc = Some(match acc {
            None => aff,
            Some(outer) => g.compose(outer, aff)?,
        });
        offsets.push(offset);
        offset += net.blocks.len();
    }
    let loss = g.flow_loss(acc.expect("stages"), ex.points.clone(), ex.targets.clone())?;
    let grads = g.backward(loss)?;
    let per_stage = offsets
        .iter()
        .enumerate()
        .map(|(n, &o)| params.stage(n as u32 + 1).collect_grads(&grads, o))
        .collect();
    Ok((g.value(loss).data[0], per_stage))
}

/// Joint gradient steps on all stages. Cost volumes are rebuilt from the
/// current parameters every step; the warps themselves are not
/// differentiated, gradients reach every stage through the composition of
/// per-stage affines at the sample points.
pub fn finetune_end_to_end(dataset: &[TrainingPair], config: &PyramidConfig, params: &mut PyramidParams) -> Result<TrainReport> {
    config.validate()?;
    params.check(config)?;
    let (h, w) = image_dims(dataset)?;
    let t = &config.train;
    let stages = config.stages() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed ^ 0xF1_0000_0000_0000);
    let mut sgds: Vec<Sgd> = (0..stages).map(|_| Sgd::new(t.finetune_lr, t.momentum, t.clip_norm)).collect();
    let mut curve = Vec::with_capacity(t.finetune_iterations);
    for it in 0..t.finetune_iterations {
        let idx = batch_indices(&mut rng, dataset.len(), t.batch_size);
        let snapshot = &*params;
        let examples: Vec<FinetuneExample> = idx
            .par_iter()
            .map(|&n| finetune_example(&dataset[n], config, snapshot))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        if examples.is_empty() {
            return Err(Error::TrainingAborted(format!("finetune iteration {it}: no pair reached the sample floor")));
        }
        let results: Vec<(f64, Vec<Vec<Vec<f64>>>)> =
            examples.par_iter().map(|ex| finetune_grad(snapshot, ex, h, w)).collect::<Result<_>>()?;
        let loss = results.iter().map(|r| r.0).sum::<f64>() / results.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: it });
        }
        for (s, sgd) in sgds.iter_mut().enumerate() {
            let grads: Vec<Vec<Vec<f64>>> = results.iter().map(|r| r.1[s].clone()).collect();
            sgd.step(params.stage_mut(s as u32 + 1), &mean_grads(&grads))?;
        }
        curve.push((it, loss));
    }
    Ok(TrainReport { stage: config.stages(), loss_curve: curve, pairs_used: dataset.len(), skipped: Vec::new() })
}

/// Mean finetuning loss over every pair that reaches the sample floor.
pub fn finetune_loss(dataset: &[TrainingPair], config: &PyramidConfig, params: &PyramidParams) -> Result<f64> {
    let (h, w) = image_dims(dataset)?;
    let losses: Vec<f64> = dataset
        .par_iter()
        .map(|p| match finetune_example(p, config, params)? {
            Some(ex) => Ok(Some(finetune_grad(params, &ex, h, w)?.0)),
            None => Ok(None),
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    if losses.is_empty() {
        return Err(Error::TrainingAborted("no pair reached the sample floor".into()));
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Gradient norm per stage of the finetuning loss on one pair.
pub fn finetune_grad_norms(pair: &TrainingPair, config: &PyramidConfig, params: &PyramidParams) -> Result<Option<Vec<f64>>> {
    let (h, w) = (pair.target.height, pair.target.width);
    let Some(ex) = finetune_example(pair, config, params)? else { return Ok(None) };
    let (_, grads) = finetune_grad(params, &ex, h, w)?;
    Ok(Some(grads.iter().map(|s| s.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()).collect()))
}

/// Loss curve as CSV with an `iteration,loss` header.
pub fn loss_curve_csv(curve: &[(usize, f64)]) -> String {
    let mut out = String::from("iteration,loss\n");
    for (it, l) in curve {
        out.push_str(&format!("{it},{l:e}\n"));
    }
    out
}

/// Plain-text run record: `key=value` lines.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunManifest {
    pub seed: u64,
    pub config_hash: String,
    /// `(stage name, checkpoint path)`.
    pub checkpoints: Vec<(String, String)>,
    /// `(stage name, loss curve CSV path)`.
    pub loss_curves: Vec<(String, String)>,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut out = format!("seed={}\nconfig_hash={}\n", self.seed, self.config_hash);
        for (name, path) in &self.checkpoints {
            out.push_str(&format!("checkpoint.{name}={path}\n"));
        }
        for (name, path) in &self.loss_curves {
            out.push_str(&format!("loss_curve.{name}={path}\n"));
        }
        out
    }
}
