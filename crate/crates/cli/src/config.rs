//! Flat `key=value` run configuration with dotted keys.

use std::path::{Path, PathBuf};

use affine_pyramid::pipeline::PyramidConfig;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Pyramid and training settings plus paths, after overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub pyramid: PyramidConfig,
    pub seed: u64,
    pub gradcheck_eps: f64,
    pub gradcheck_tol: f64,
    pub gradcheck_samples: usize,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pyramid: PyramidConfig::default(),
            seed: 0,
            gradcheck_eps: 1e-4,
            gradcheck_tol: 1e-3,
            gradcheck_samples: 24,
            dataset: None,
            out: None,
            checkpoint: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse().map_err(|_| CliError::usage(format!("{key}: cannot parse {v:?}")))
}

/// A real or a fraction such as `1/15`.
fn parse_ratio(key: &str, v: &str) -> Result<f64, CliError> {
    match v.split_once('/') {
        Some((a, b)) => Ok(parse_num::<f64>(key, a.trim())? / parse_num::<f64>(key, b.trim())?),
        None => parse_num(key, v),
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool, CliError> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::usage(format!("{key}: expected true or false, got {v:?}"))),
    }
}

#[derive(Default)]
struct Explicit {
    ratios: bool,
    scales: bool,
}

impl RunConfig {
    /// Reads an optional config file, then applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        let mut explicit = Explicit::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
            for (n, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| CliError::usage(format!("{}:{}: expected key=value", p.display(), n + 1)))?;
                cfg.set(k.trim(), v.trim(), &mut explicit)?;
            }
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| CliError::usage(format!("--set {o:?}: expected key=value")))?;
            cfg.set(k.trim(), v.trim(), &mut explicit)?;
        }
        cfg.fit_stage_lists(&explicit);
        cfg.pyramid.validate().map_err(|e| CliError::usage(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.pyramid.train.seed = seed;
    }

    fn set(&mut self, key: &str, v: &str, explicit: &mut Explicit) -> Result<(), CliError> {
        let t = &mut self.pyramid.train;
        match key {
            "seed" => {
                let s = parse_num(key, v)?;
                self.set_seed(s);
            }
            "pyramid.k" => self.pyramid.k = parse_num(key, v)?,
            "pyramid.stride" => self.pyramid.stride = parse_num(key, v)?,
            "pyramid.window_ratios" => {
                self.pyramid.window_ratios = v.split(',').map(|s| parse_ratio(key, s.trim())).collect::<Result<_, _>>()?;
                explicit.ratios = true;
            }
            "pyramid.scales" => {
                self.pyramid.scale_indices = v
                    .split(';')
                    .map(|stage| stage.split(',').map(|s| parse_num(key, s.trim())).collect::<Result<Vec<u32>, _>>())
                    .collect::<Result<_, _>>()?;
                explicit.scales = true;
            }
            "train.iterations" => t.iterations = parse_num(key, v)?,
            "train.batch_size" => t.batch_size = parse_num(key, v)?,
            "train.lr" => t.lr = parse_num(key, v)?,
            "train.momentum" => t.momentum = parse_num(key, v)?,
            "train.clip_norm" => t.clip_norm = if v == "none" { None } else { Some(parse_num(key, v)?) },
            "train.msac_iterations" => t.msac_iterations = parse_num(key, v)?,
            "train.msac_threshold" => t.msac_threshold_px = parse_num(key, v)?,
            "train.min_inlier_ratio" => t.min_inlier_ratio = parse_num(key, v)?,
            "train.augment" => t.augment = parse_bool(key, v)?,
            "train.finetune_iterations" => t.finetune_iterations = parse_num(key, v)?,
            "train.finetune_lr" => t.finetune_lr = parse_num(key, v)?,
            "gradcheck.eps" => self.gradcheck_eps = parse_num(key, v)?,
            "gradcheck.tol" => self.gradcheck_tol = parse_num(key, v)?,
            "gradcheck.samples" => self.gradcheck_samples = parse_num(key, v)?,
            "paths.dataset" => self.dataset = Some(PathBuf::from(v)),
            "paths.out" => self.out = Some(PathBuf::from(v)),
            "paths.checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            _ => return Err(CliError::usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// When only `pyramid.k` changed, keeps the first `k` default grid
    /// entries and the default pixel-level entry.
    fn fit_stage_lists(&mut self, explicit: &Explicit) {
        let k = self.pyramid.k as usize;
        let d = PyramidConfig::default();
        if !explicit.ratios && self.pyramid.window_ratios.len() != k + 1 && k > 0 {
            self.pyramid.window_ratios = fit(&d.window_ratios, k);
        }
        if !explicit.scales && self.pyramid.scale_indices.len() != k + 1 && k > 0 {
            self.pyramid.scale_indices = fit(&d.scale_indices, k);
        }
    }

    /// Every setting except paths, one `key=value` per line in a fixed order.
    pub fn canonical(&self) -> String {
        let p = &self.pyramid;
        let t = &p.train;
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let scales = p
            .scale_indices
            .iter()
            .map(|s| s.iter().map(u32::to_string).collect::<Vec<_>>().join(","))
            .collect::<Vec<_>>()
            .join(";");
        let clip = t.clip_norm.map_or("none".to_string(), |c| format!("{c:?}"));
        [
            format!("seed={}", self.seed),
            format!("pyramid.k={}", p.k),
            format!("pyramid.window_ratios={}", list(&p.window_ratios)),
            format!("pyramid.scales={scales}"),
            format!("pyramid.stride={}", p.stride),
            format!("train.iterations={}", t.iterations),
            format!("train.batch_size={}", t.batch_size),
            format!("train.lr={:?}", t.lr),
            format!("train.momentum={:?}", t.momentum),
            format!("train.clip_norm={clip}"),
            format!("train.msac_iterations={}", t.msac_iterations),
            format!("train.msac_threshold={:?}", t.msac_threshold_px),
            format!("train.min_inlier_ratio={:?}", t.min_inlier_ratio),
            format!("train.augment={}", t.augment),
            format!("train.finetune_iterations={}", t.finetune_iterations),
            format!("train.finetune_lr={:?}", t.finetune_lr),
            format!("gradcheck.eps={:?}", self.gradcheck_eps),
            format!("gradcheck.tol={:?}", self.gradcheck_tol),
            format!("gradcheck.samples={}", self.gradcheck_samples),
        ]
        .join("\n")
            + "\n"
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical().as_bytes()))
    }
}

/// `k` grid entries (repeating the last grid entry) plus the pixel entry.
fn fit<T: Clone>(list: &[T], k: usize) -> Vec<T> {
    let last = list.len() - 1;
    (0..=k).map(|i| if i == k { list[last].clone() } else { list[i.min(last - 1)].clone() }).collect()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
