//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use affine_pyramid::autodiff::OpKind;
use affine_pyramid::eval::{
    endpoint_accuracy, endpoint_accuracy_sweep, mask_iou, mean_endpoint_error, metrics_csv, pck, sweep_csv,
    sweep_thresholds, warp_keypoints, warp_object_mask, Keypoints, MetricRow, DEFAULT_ALPHAS, DEFAULT_THRESHOLD,
};
use affine_pyramid::geometry::{flow_from_field, warp_image, Affine2D, AffineField, FlowField};
use affine_pyramid::image::Image;
use affine_pyramid::io::{decode_flow, decode_pnm, encode_flow, encode_pnm, load_flow, load_image, save_affine_field, save_flow, save_image};
use affine_pyramid::net::{gradcheck_suite, GradCheckConfig, NetParams};
use affine_pyramid::pipeline::{finetune_end_to_end, loss_curve_csv, run_inference, train_stage, PyramidParams, RunManifest};
use affine_pyramid::supervision::ObjectMask;
use affine_pyramid::synth::{procedural_scene, synth_pair, SynthMode};
use clap::{Args, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::{hex, RunConfig};
use crate::dataset::{load_dataset, load_mask, save_mask, PairEntry, LISTING, LISTING_HEADER};
use crate::{CliError, ConfigArgs};

const CONFIG_FILE: &str = "config.txt";
const MANIFEST_FILE: &str = "manifest.txt";

fn load_config(args: &ConfigArgs, seed: Option<u64>, fallback: Option<&Path>) -> Result<RunConfig, CliError> {
    let path = args.config.as_deref().or(fallback.filter(|p| p.is_file()));
    let mut cfg = RunConfig::load(path, &args.set)?;
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{}: no such file", path.display())))
    }
}

fn stage_name(stage: u32, k: u32) -> String {
    if stage > k {
        "pixel".into()
    } else {
        format!("level{stage}")
    }
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    Ok(hex(&Sha256::digest(bytes)))
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Directory holding `pairs.txt`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory for checkpoints, loss curves and the manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Finetune all stages jointly after sequential training.
    #[arg(long)]
    finetune: bool,
}

pub fn train(args: TrainArgs, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = load_config(&args.cfg, seed, None)?;
    let dataset_dir = args.dataset.or(cfg.dataset.clone()).ok_or_else(|| CliError::usage("train needs --dataset"))?;
    let out = args.out.or(cfg.out.clone()).ok_or_else(|| CliError::usage("train needs --out"))?;
    if !dataset_dir.is_dir() {
        return Err(CliError::usage(format!("dataset directory {} does not exist", dataset_dir.display())));
    }
    require_file(&dataset_dir.join(LISTING))?;
    ensure_dir(&out)?;

    let pairs = load_dataset(&dataset_dir)?;
    let first = pairs.first().ok_or_else(|| CliError::usage(format!("{}: no pairs listed", dataset_dir.join(LISTING).display())))?;
    let config = &cfg.pyramid;
    let mut params = PyramidParams::identity(config, first.source.height, first.source.width)?;

    let mut manifest = RunManifest { seed: cfg.seed, config_hash: cfg.hash(), ..Default::default() };
    for stage in 1..=config.stages() {
        let name = stage_name(stage, config.k);
        let report = train_stage(stage, &pairs, config, &mut params).map_err(CliError::compute)?;
        let last = report.loss_curve.last().map_or(f64::NAN, |l| l.1);
        eprintln!(
            "{name}: {} iterations, final loss {last:.4}, {} pairs used, {} skipped",
            report.loss_curve.len(),
            report.pairs_used,
            report.skipped.len()
        );
        let csv = format!("loss_{name}.csv");
        write(&out.join(&csv), loss_curve_csv(&report.loss_curve).as_bytes())?;
        manifest.loss_curves.push((name, csv));
    }
    if args.finetune {
        let report = finetune_end_to_end(&pairs, config, &mut params).map_err(CliError::compute)?;
        eprintln!("finetune: {} iterations", report.loss_curve.len());
        let csv = "loss_finetune.csv".to_string();
        write(&out.join(&csv), loss_curve_csv(&report.loss_curve).as_bytes())?;
        manifest.loss_curves.push(("finetune".into(), csv));
    }

    let mut digests = String::new();
    for stage in 1..=config.stages() {
        let name = stage_name(stage, config.k);
        let file = format!("{name}.pnp");
        params.stage(stage).save(out.join(&file)).map_err(CliError::compute)?;
        digests.push_str(&format!("checkpoint_sha256.{name}={}\n", sha256_file(&out.join(&file))?));
        manifest.checkpoints.push((name, file));
    }
    write(&out.join(CONFIG_FILE), cfg.canonical().as_bytes())?;
    write(&out.join(MANIFEST_FILE), format!("{}{digests}", manifest.to_text()).as_bytes())?;
    Ok(())
}

fn load_params(dir: &Path, cfg: &RunConfig) -> Result<PyramidParams, CliError> {
    let config = &cfg.pyramid;
    let load = |stage: u32| -> Result<NetParams, CliError> {
        let path = dir.join(format!("{}.pnp", stage_name(stage, config.k)));
        require_file(&path)?;
        NetParams::load(&path).map_err(|e| CliError::input(&path, e))
    };
    let grids = (1..=config.k).map(load).collect::<Result<Vec<_>, _>>()?;
    let params = PyramidParams { grids, pixel: load(config.stages())? };
    params.check(config).map_err(|e| CliError::input(dir, e))?;
    Ok(params)
}

fn pixmap_ext(img: &Image) -> &'static str {
    if img.channels == 3 {
        "ppm"
    } else {
        "pgm"
    }
}

/// Per-pixel translations reproducing a flow exactly.
fn field_from_flow(flow: &FlowField) -> AffineField {
    let cells = flow.data.iter().map(|v| Affine2D::translation(v[0], v[1])).collect();
    AffineField { height: flow.height, width: flow.width, cells }
}

/// Endpoint accuracy at `threshold` and the native-resolution mean error.
fn flow_rows(flow: &FlowField, gt: &FlowField, mask: &ObjectMask, threshold: f64) -> Result<Vec<MetricRow>, CliError> {
    let acc = endpoint_accuracy(flow, gt, mask, threshold)?;
    let epe = mean_endpoint_error(&field_from_flow(flow), &field_from_flow(gt), mask)?;
    Ok(vec![
        MetricRow { metric: "epe_accuracy".into(), param: threshold, value: acc.fraction, count: acc.count },
        MetricRow { metric: "mean_epe".into(), param: 0.0, value: epe, count: mask.count() },
    ])
}

fn mask_or_full(path: Option<&Path>, height: usize, width: usize) -> Result<ObjectMask, CliError> {
    match path {
        Some(p) => load_mask(p),
        None => Ok(ObjectMask::full(height, width)),
    }
}

#[derive(Args)]
pub struct InferArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Directory written by `train`; zero-head regressors when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the residual field of every stage.
    #[arg(long)]
    per_level: bool,
    /// Ground-truth flow; adds `eval.csv` to the outputs.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Evaluation mask for `--gt`.
    #[arg(long, requires = "gt")]
    mask: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
}

pub fn infer(args: InferArgs, seed: Option<u64>) -> Result<(), CliError> {
    let fallback = args.checkpoint.as_ref().map(|d| d.join(CONFIG_FILE));
    let cfg = load_config(&args.cfg, seed, fallback.as_deref())?;
    if let Some(dir) = &args.checkpoint {
        if !dir.is_dir() {
            return Err(CliError::usage(format!("checkpoint directory {} does not exist", dir.display())));
        }
    }
    for p in [Some(&args.source), Some(&args.target), args.gt.as_ref(), args.mask.as_ref()].into_iter().flatten() {
        require_file(p)?;
    }
    ensure_dir(&args.out)?;

    let source = load_image(&args.source).map_err(|e| CliError::input(&args.source, e))?;
    let target = load_image(&args.target).map_err(|e| CliError::input(&args.target, e))?;
    let params = match &args.checkpoint {
        Some(dir) => load_params(dir, &cfg)?,
        None => PyramidParams::identity(&cfg.pyramid, target.height, target.width)?,
    };
    let result = run_inference(&source, &target, &cfg.pyramid, &params)?;
    let flow = flow_from_field(&result.field);
    save_flow(&flow, args.out.join("flow.pff")).map_err(CliError::compute)?;
    save_affine_field(&result.field, args.out.join("field.paf")).map_err(CliError::compute)?;
    let warped = warp_image(&source, &result.field)?;
    save_image(&warped, args.out.join(format!("warped.{}", pixmap_ext(&warped)))).map_err(CliError::compute)?;
    if args.per_level {
        for (n, f) in result.level_fields.iter().enumerate() {
            let name = stage_name(n as u32 + 1, cfg.pyramid.k);
            save_affine_field(f, args.out.join(format!("{name}.paf"))).map_err(CliError::compute)?;
        }
    }
    if let Some(gt_path) = &args.gt {
        let gt = load_flow(gt_path).map_err(|e| CliError::input(gt_path, e))?;
        let mask = mask_or_full(args.mask.as_deref(), gt.height, gt.width)?;
        // Score the flow as written so the report matches `eval` on the same files.
        let stored = decode_flow(&encode_flow(&flow)?)?;
        let rows = flow_rows(&stored, &gt, &mask, args.threshold)?;
        write(&args.out.join("eval.csv"), metrics_csv(&rows).as_bytes())?;
    }
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Protocol {
    /// Endpoint accuracy against a ground-truth flow.
    Flow,
    /// Keypoint transfer.
    Pck,
    /// Mask transfer.
    Iou,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    protocol: Protocol,
    /// Estimated flow (PFF1) in the target frame.
    #[arg(long)]
    flow: PathBuf,
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Foreground mask of the target (flow protocol).
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Emit accuracy for every threshold in 1..=15 instead.
    #[arg(long)]
    sweep: bool,
    #[arg(long)]
    source_keypoints: Option<PathBuf>,
    #[arg(long)]
    target_keypoints: Option<PathBuf>,
    /// PCK radius factors; repeatable.
    #[arg(long)]
    alpha: Vec<f64>,
    #[arg(long)]
    source_mask: Option<PathBuf>,
    #[arg(long)]
    target_mask: Option<PathBuf>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl EvalArgs {
    fn check_inputs(&self) -> Result<(), CliError> {
        let given = |o: &Option<PathBuf>| o.is_some();
        let (needed, foreign): (Vec<(&str, bool)>, Vec<(&str, bool)>) = match self.protocol {
            Protocol::Flow => (
                vec![("--gt", given(&self.gt))],
                vec![
                    ("--source-keypoints", given(&self.source_keypoints)),
                    ("--target-keypoints", given(&self.target_keypoints)),
                    ("--source-mask", given(&self.source_mask)),
                    ("--target-mask", given(&self.target_mask)),
                    ("--alpha", !self.alpha.is_empty()),
                ],
            ),
            Protocol::Pck => (
                vec![("--source-keypoints", given(&self.source_keypoints)), ("--target-keypoints", given(&self.target_keypoints))],
                vec![
                    ("--gt", given(&self.gt)),
                    ("--mask", given(&self.mask)),
                    ("--source-mask", given(&self.source_mask)),
                    ("--target-mask", given(&self.target_mask)),
                    ("--sweep", self.sweep),
                ],
            ),
            Protocol::Iou => (
                vec![("--source-mask", given(&self.source_mask)), ("--target-mask", given(&self.target_mask))],
                vec![
                    ("--gt", given(&self.gt)),
                    ("--mask", given(&self.mask)),
                    ("--source-keypoints", given(&self.source_keypoints)),
                    ("--target-keypoints", given(&self.target_keypoints)),
                    ("--alpha", !self.alpha.is_empty()),
                    ("--sweep", self.sweep),
                ],
            ),
        };
        let name = self.protocol.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default();
        if let Some((flag, _)) = needed.iter().find(|(_, ok)| !ok) {
            return Err(CliError::usage(format!("protocol {name} needs {flag}")));
        }
        if let Some((flag, _)) = foreign.iter().find(|(_, set)| *set) {
            return Err(CliError::usage(format!("{flag} does not apply to protocol {name}")));
        }
        let paths = [&self.gt, &self.mask, &self.source_keypoints, &self.target_keypoints, &self.source_mask, &self.target_mask];
        require_file(&self.flow)?;
        for p in paths.into_iter().flatten() {
            require_file(p)?;
        }
        Ok(())
    }
}

fn read_keypoints(path: &Path) -> Result<Keypoints, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    Keypoints::parse(&text).map_err(|e| CliError::input(path, e))
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    args.check_inputs()?;
    let flow = load_flow(&args.flow).map_err(|e| CliError::input(&args.flow, e))?;
    let csv = match args.protocol {
        Protocol::Flow => {
            let gt_path = args.gt.as_deref().unwrap_or(Path::new(""));
            let gt = load_flow(gt_path).map_err(|e| CliError::input(gt_path, e))?;
            let mask = mask_or_full(args.mask.as_deref(), gt.height, gt.width)?;
            if args.sweep {
                sweep_csv(&endpoint_accuracy_sweep(&flow, &gt, &mask, &sweep_thresholds())?)
            } else {
                metrics_csv(&flow_rows(&flow, &gt, &mask, args.threshold)?)
            }
        }
        Protocol::Pck => {
            let src = read_keypoints(args.source_keypoints.as_deref().unwrap_or(Path::new("")))?;
            let tgt = read_keypoints(args.target_keypoints.as_deref().unwrap_or(Path::new("")))?;
            tgt.check_bounds(flow.height, flow.width)?;
            // Target keypoints travel to the source through the flow.
            let warped = warp_keypoints(&field_from_flow(&flow), &tgt.points);
            let alphas = if args.alpha.is_empty() { DEFAULT_ALPHAS.to_vec() } else { args.alpha.clone() };
            let rows = alphas
                .iter()
                .map(|&a| Ok(MetricRow { metric: "pck".into(), param: a, value: pck(&warped, &src.points, src.bbox, a)?, count: src.points.len() }))
                .collect::<Result<Vec<_>, CliError>>()?;
            metrics_csv(&rows)
        }
        Protocol::Iou => {
            let src = load_mask(args.source_mask.as_deref().unwrap_or(Path::new("")))?;
            let tgt = load_mask(args.target_mask.as_deref().unwrap_or(Path::new("")))?;
            if (src.height, src.width) != (flow.height, flow.width) {
                return Err(CliError::usage(format!(
                    "source mask {}x{} vs flow {}x{}",
                    src.height, src.width, flow.height, flow.width
                )));
            }
            let iou = match warp_object_mask(&src, &field_from_flow(&flow))? {
                Some(w) => mask_iou(&w, &tgt)?,
                None => 0.0,
            };
            metrics_csv(&[MetricRow { metric: "iou".into(), param: 0.0, value: iou, count: tgt.count() }])
        }
    };
    match &args.out {
        Some(p) => write(p, csv.as_bytes()),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

#[derive(Args)]
pub struct SynthArgs {
    /// Directory of PGM/PPM source images; procedural scenes when omitted.
    #[arg(long)]
    images: Option<PathBuf>,
    /// global, quadsplit or flip.
    #[arg(long, default_value = "global")]
    mode: SynthMode,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    /// Side of procedural scenes.
    #[arg(long, default_value_t = 128)]
    size: usize,
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::usage(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm" || x == "ppm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::usage(format!("{}: no .pgm or .ppm images", dir.display())));
    }
    Ok(paths)
}

/// 8-bit round trip so the written source re-warps to the written target.
fn quantized(img: &Image) -> Result<Image, CliError> {
    Ok(decode_pnm(&encode_pnm(img)?)?)
}

pub fn synth(args: SynthArgs, seed: Option<u64>) -> Result<(), CliError> {
    let images = match &args.images {
        Some(dir) => list_images(dir)?
            .iter()
            .map(|p| load_image(p).map_err(|e| CliError::input(p, e)))
            .collect::<Result<Vec<_>, _>>()?,
        None => Vec::new(),
    };
    ensure_dir(&args.out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(0));
    let mut listing = String::from(LISTING_HEADER);
    for n in 0..args.count {
        let (image, mask) = match images.get(n % images.len().max(1)) {
            Some(img) => (img.clone(), None),
            None => {
                let (img, mask) = procedural_scene(args.size, &mut rng);
                (img, Some(mask))
            }
        };
        let pair = synth_pair(&quantized(&image)?, mask.as_ref(), &mut rng, args.mode)?;
        let ext = pixmap_ext(&pair.source);
        let file = |what: &str, ext: &str| PathBuf::from(format!("{n:04}_{what}.{ext}"));
        let entry = PairEntry {
            source: file("source", ext),
            target: file("target", ext),
            source_mask: pair.source_mask.as_ref().map(|_| file("source_mask", "pgm")),
            target_mask: pair.target_mask.as_ref().map(|_| file("target_mask", "pgm")),
            gt_field: Some(file("gt", "paf")),
        };
        save_image(&pair.source, args.out.join(&entry.source)).map_err(CliError::compute)?;
        save_image(&pair.target, args.out.join(&entry.target)).map_err(CliError::compute)?;
        if let (Some(m), Some(p)) = (&pair.source_mask, &entry.source_mask) {
            save_mask(m, &args.out.join(p))?;
        }
        if let (Some(m), Some(p)) = (&pair.target_mask, &entry.target_mask) {
            save_mask(m, &args.out.join(p))?;
        }
        let gt = pair.gt_field.as_ref().ok_or_else(|| CliError::usage("synthetic pair lacks ground truth"))?;
        save_affine_field(gt, args.out.join(file("gt", "paf"))).map_err(CliError::compute)?;
        save_flow(&flow_from_field(gt), args.out.join(file("gt", "pff"))).map_err(CliError::compute)?;
        listing.push_str(&entry.to_line());
    }
    write(&args.out.join(LISTING), listing.as_bytes())
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Fault {
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

impl From<Fault> for OpKind {
    fn from(f: Fault) -> Self {
        match f {
            Fault::Conv2d => OpKind::Conv2d,
            Fault::Relu => OpKind::Relu,
            Fault::AvgPool => OpKind::AvgPool,
            Fault::Upsample => OpKind::Upsample,
            Fault::Dense => OpKind::Dense,
            Fault::Concat => OpKind::Concat,
            Fault::AffineAtPoints => OpKind::AffineAtPoints,
            Fault::Compose => OpKind::Compose,
            Fault::FlowLoss => OpKind::FlowLoss,
            Fault::Warp => OpKind::Warp,
        }
    }
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Break the backward rule of one layer type.
    #[arg(long, value_enum)]
    inject_fault: Option<Fault>,
}

pub fn gradcheck(args: GradcheckArgs, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = load_config(&args.cfg, seed, None)?;
    let gc = GradCheckConfig {
        eps: cfg.gradcheck_eps,
        tol: cfg.gradcheck_tol,
        max_per_block: Some(cfg.gradcheck_samples),
        seed: cfg.seed,
        fault: args.inject_fault.map(OpKind::from),
    };
    let reports = gradcheck_suite(&gc).map_err(CliError::compute)?;
    let mut failed = 0;
    for r in &reports {
        if r.passed() {
            println!("PASS {:<30} max_rel_error={:.3e}", r.label, r.max_rel_error());
        } else {
            failed += 1;
            println!("FAIL {:<30} max_rel_error={:.3e} blocks={}", r.label, r.max_rel_error(), r.failures().join(","));
        }
    }
    println!("{} of {} checks passed", reports.len() - failed, reports.len());
    if failed > 0 {
        return Err(CliError { code: 1, message: format!("{failed} gradient checks failed") });
    }
    Ok(())
}
