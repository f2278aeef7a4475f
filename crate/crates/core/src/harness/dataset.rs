//! Degraded-pair directories.
//!
//! Layout:
//!
//! ```text
//! <out>/gt/<name>.png     ground truth after crop/resize, 8-bit
//! <out>/deg/<name>.png    measurement, clamped and quantized for viewing
//! <out>/meta.json         task, operator parameters, sigma and per-file seeds
//! ```
//!
//! The ground truth is quantized before it is degraded, so the literal
//! unclamped measurement `y = A x + n` can be regenerated bit-exactly from
//! `gt/<name>.png` and the recorded seed. [`PairSet::load`] does exactly that.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{center_crop_resize, load_image, save_image, ImageTensor, Shape};
use crate::operators::{
    add_noise, LinearOperator, NoiseSpec, Task, DEBLUR_KERNEL_SIZE, DEBLUR_SIGMA, SR_FACTOR,
};

pub const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorParams {
    pub kernel_size: Option<usize>,
    pub kernel_sigma: Option<f64>,
    pub factor: Option<usize>,
}

impl OperatorParams {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Sr4x => Self {
                kernel_size: None,
                kernel_sigma: None,
                factor: Some(SR_FACTOR),
            },
            Task::Deblur => Self {
                kernel_size: Some(DEBLUR_KERNEL_SIZE),
                kernel_sigma: Some(DEBLUR_SIGMA),
                factor: None,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub name: String,
    pub source: String,
    /// Position of the source file in the sorted listing.
    pub index: usize,
    pub seed: u64,
    pub sigma: f64,
    pub gt: String,
    pub deg: String,
    pub gt_shape: Shape,
    pub deg_shape: Shape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub source: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    pub task: Task,
    pub operator: OperatorParams,
    pub sigma: f64,
    pub base_seed: u64,
    pub working_side: usize,
    pub entries: Vec<PairEntry>,
    pub skipped: Vec<SkippedFile>,
}

/// Sorted `.png` files directly inside `dir`.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// `A x + n` for the given noise spec.
pub fn measure<A: LinearOperator<f64> + ?Sized>(
    gt: &ImageTensor<f64>,
    op: &A,
    noise: NoiseSpec,
) -> Result<ImageTensor<f64>> {
    add_noise(&op.apply(gt)?, noise)
}

/// Degrades file `index`. Undecodable inputs become `Ok(Err(skip))`.
fn degrade_one(
    index: usize,
    path: &Path,
    task: Task,
    noise: NoiseSpec,
    working_side: usize,
    out_dir: &Path,
) -> Result<std::result::Result<PairEntry, SkippedFile>> {
    let source = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let img = match load_image::<f64>(path) {
        Ok(img) => img,
        Err(e) => {
            log::warn!("skipping {}: {e}", path.display());
            return Ok(Err(SkippedFile {
                source,
                error: e.to_string(),
            }));
        }
    };
    let gt = center_crop_resize(&img, working_side)?.quantized();
    let shape = gt.shape();
    let op = task.operator(shape)?;
    let seed = noise.seed.wrapping_add(index as u64);
    let y = measure(
        &gt,
        &op,
        NoiseSpec {
            sigma: noise.sigma,
            seed,
        },
    )?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| format!("img{index}"));
    let gt_rel = format!("gt/{name}.png");
    let deg_rel = format!("deg/{name}.png");
    save_image(&gt, out_dir.join(&gt_rel))?;
    save_image(&y, out_dir.join(&deg_rel))?;
    Ok(Ok(PairEntry {
        name,
        source,
        index,
        seed,
        sigma: noise.sigma,
        gt: gt_rel,
        deg: deg_rel,
        gt_shape: shape,
        deg_shape: y.shape(),
    }))
}

/// Crops, resizes and degrades every PNG in `dataset_dir` into the pair
/// layout under `out_dir`. File `i` of the sorted listing uses noise seed
/// `seed + i`. Unreadable files are skipped, logged and recorded. Files are
/// processed on the current rayon pool.
pub fn degrade_dataset(
    dataset_dir: &Path,
    task: Task,
    noise: NoiseSpec,
    working_side: usize,
    out_dir: &Path,
) -> Result<PairMeta> {
    let noise = NoiseSpec::new(noise.sigma, noise.seed)?;
    let files = list_pngs(dataset_dir)?;
    if files.is_empty() {
        return Err(Error::invalid(format!(
            "{} contains no PNG files",
            dataset_dir.display()
        )));
    }
    let gt_dir = out_dir.join("gt");
    let deg_dir = out_dir.join("deg");
    for d in [&gt_dir, &deg_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    let outcomes = files
        .par_iter()
        .enumerate()
        .map(|(index, path)| degrade_one(index, path, task, noise, working_side, out_dir))
        .collect::<Result<Vec<_>>>()?;
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(entry) => entries.push(entry),
            Err(skip) => skipped.push(skip),
        }
    }
    if entries.is_empty() {
        return Err(Error::invalid(format!(
            "no readable PNG files in {}",
            dataset_dir.display()
        )));
    }
    let meta = PairMeta {
        task,
        operator: OperatorParams::for_task(task),
        sigma: noise.sigma,
        base_seed: noise.seed,
        working_side,
        entries,
        skipped,
    };
    let meta_path = out_dir.join(META_FILE);
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)
        .map_err(|e| Error::io(&meta_path, e))?;
    Ok(meta)
}

/// One restoration problem: ground truth and its literal measurement.
#[derive(Debug, Clone)]
pub struct Pair {
    pub entry: PairEntry,
    pub gt: ImageTensor<f64>,
    pub measurement: ImageTensor<f64>,
}

#[derive(Debug, Clone)]
pub struct PairSet {
    pub dir: PathBuf,
    pub meta: PairMeta,
    pub pairs: Vec<Pair>,
}

impl PairSet {
    pub fn is_pair_dir(dir: &Path) -> bool {
        dir.join(META_FILE).is_file()
    }

    /// Loads ground truth and regenerates each literal measurement.
    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: PairMeta = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: meta_path.clone(),
            detail: e.to_string(),
        })?;
        let mut pairs = Vec::with_capacity(meta.entries.len());
        let mut op_cache: Option<(Shape, crate::operators::LinearDegradation<f64>)> = None;
        for entry in &meta.entries {
            let gt: ImageTensor<f64> = load_image(dir.join(&entry.gt))?;
            gt.check_shape(entry.gt_shape)?;
            if op_cache.as_ref().map(|(s, _)| *s) != Some(gt.shape()) {
                op_cache = Some((gt.shape(), meta.task.operator(gt.shape())?));
            }
            let op = &op_cache.as_ref().expect("operator built above").1;
            let measurement = measure(&gt, op, NoiseSpec::new(entry.sigma, entry.seed)?)?;
            pairs.push(Pair {
                entry: entry.clone(),
                gt,
                measurement,
            });
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            meta,
            pairs,
        })
    }
}
