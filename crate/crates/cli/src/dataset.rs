//! Pair listings (`pairs.txt`) and mask files.

use std::path::{Path, PathBuf};

use affine_pyramid::io::{load_affine_field, load_image, save_image};
use affine_pyramid::supervision::ObjectMask;
use affine_pyramid::synth::TrainingPair;
use affine_pyramid::image::Image;

use crate::CliError;

pub const LISTING: &str = "pairs.txt";
pub const LISTING_HEADER: &str = "# source target source_mask target_mask gt_field\n";

/// One row of a listing; optional columns hold `-` when absent.
#[derive(Debug, Clone, PartialEq)]
pub struct PairEntry {
    pub source: PathBuf,
    pub target: PathBuf,
    pub source_mask: Option<PathBuf>,
    pub target_mask: Option<PathBuf>,
    pub gt_field: Option<PathBuf>,
}

impl PairEntry {
    pub fn to_line(&self) -> String {
        let opt = |p: &Option<PathBuf>| p.as_ref().map_or("-".to_string(), |p| p.display().to_string());
        format!(
            "{} {} {} {} {}\n",
            self.source.display(),
            self.target.display(),
            opt(&self.source_mask),
            opt(&self.target_mask),
            opt(&self.gt_field)
        )
    }
}

/// Parses a listing; relative paths resolve against `base`.
pub fn parse_listing(text: &str, base: &Path) -> Result<Vec<PairEntry>, CliError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if !(cols.len() == 2 || cols.len() == 4 || cols.len() == 5) {
            return Err(CliError::usage(format!("{LISTING}:{}: expected 2, 4 or 5 columns, found {}", n + 1, cols.len())));
        }
        let path = |i: usize| -> Option<PathBuf> { cols.get(i).filter(|c| **c != "-").map(|c| base.join(c)) };
        out.push(PairEntry {
            source: base.join(cols[0]),
            target: base.join(cols[1]),
            source_mask: path(2),
            target_mask: path(3),
            gt_field: path(4),
        });
    }
    Ok(out)
}

pub fn load_mask(path: &Path) -> Result<ObjectMask, CliError> {
    let img = load_image(path).map_err(|e| CliError::input(path, e))?;
    if img.channels != 1 {
        return Err(CliError::usage(format!("{}: masks must be single-channel PGM", path.display())));
    }
    ObjectMask::new(img.height, img.width, img.data.iter().map(|&v| v >= 0.5).collect()).map_err(|e| CliError::input(path, e))
}

pub fn save_mask(mask: &ObjectMask, path: &Path) -> Result<(), CliError> {
    let img = Image::new(mask.height, mask.width, 1, mask.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
        .map_err(CliError::compute)?;
    save_image(&img, path).map_err(CliError::compute)
}

/// Loads every pair of `<dir>/pairs.txt`; all pairs must share one size.
pub fn load_dataset(dir: &Path) -> Result<Vec<TrainingPair>, CliError> {
    let listing = dir.join(LISTING);
    let text = std::fs::read_to_string(&listing).map_err(|e| CliError::usage(format!("{}: {e}", listing.display())))?;
    let entries = parse_listing(&text, dir)?;
    let mut pairs = Vec::with_capacity(entries.len());
    for e in &entries {
        let source = load_image(&e.source).map_err(|err| CliError::input(&e.source, err))?;
        let target = load_image(&e.target).map_err(|err| CliError::input(&e.target, err))?;
        let pair = TrainingPair {
            source,
            target,
            source_mask: e.source_mask.as_deref().map(load_mask).transpose()?,
            target_mask: e.target_mask.as_deref().map(load_mask).transpose()?,
            gt_field: match &e.gt_field {
                Some(p) => Some(load_affine_field(p).map_err(|err| CliError::input(p, err))?),
                None => None,
            },
        };
        pair.validate().map_err(|err| CliError::input(&e.source, err))?;
        pairs.push(pair);
    }
    if let Some(first) = pairs.first() {
        let dims = (first.source.height, first.source.width);
        for (n, p) in pairs.iter().enumerate() {
            if (p.source.height, p.source.width) != dims || (p.target.height, p.target.width) != dims {
                return Err(CliError::usage(format!(
                    "pair {n}: all images must be {}x{} like pair 0",
                    dims.0, dims.1
                )));
            }
        }
    }
    Ok(pairs)
}
