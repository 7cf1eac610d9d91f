//! Files: atomic writes, PNG rasters, checkpoints and JSON-lines metrics.

use std::fs;
use std::io::{Cursor, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageFormat};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use vcenet_core::checkpoint::Checkpoint;
use vcenet_core::image::{LabelMap, Mask, RgbImage};
use vcenet_core::metrics::MetricsReport;

use crate::error::{CliError, CliResult};

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::user(format!("{}: {e}", path.display()))
}

/// Writes `bytes` to a temporary file beside `path`, then renames it into
/// place. Readers see either the old file or the complete new one.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let name = path.file_name().ok_or_else(|| CliError::user(format!("{} is not a file path", path.display())))?;
    let tmp: PathBuf = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(io_err(path, e));
    }
    Ok(())
}

fn open_image(path: &Path) -> CliResult<DynamicImage> {
    image::open(path).map_err(|e| io_err(path, e))
}

pub fn read_rgb(path: &Path) -> CliResult<RgbImage> {
    let img = open_image(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(RgbImage::new(w as usize, h as usize, img.into_raw())?)
}

/// Reads an 8-bit grayscale label map. Other pixel formats are rejected rather
/// than converted, since conversion would alter class ids.
pub fn read_labels(path: &Path) -> CliResult<LabelMap> {
    match open_image(path)? {
        DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            Ok(LabelMap::new(w as usize, h as usize, img.into_raw())?)
        }
        other => Err(CliError::user(format!(
            "{}: label maps must be 8-bit grayscale, got {:?}",
            path.display(),
            other.color()
        ))),
    }
}

fn png_bytes(img: DynamicImage) -> CliResult<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).map_err(|e| CliError::Internal(format!("png encoding: {e}")))?;
    Ok(out.into_inner())
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> CliResult<()> {
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
        .ok_or_else(|| CliError::Internal("rgb buffer size".into()))?;
    atomic_write(path, &png_bytes(DynamicImage::ImageRgb8(buf))?)
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> CliResult<()> {
    let buf = GrayImage::from_raw(labels.width as u32, labels.height as u32, labels.data.clone())
        .ok_or_else(|| CliError::Internal("label buffer size".into()))?;
    atomic_write(path, &png_bytes(DynamicImage::ImageLuma8(buf))?)
}

/// Binary mask as an 8-bit image with values 0 and 255.
pub fn write_mask(path: &Path, mask: &Mask) -> CliResult<()> {
    let data = mask.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    let buf = GrayImage::from_raw(mask.width as u32, mask.height as u32, data)
        .ok_or_else(|| CliError::Internal("mask buffer size".into()))?;
    atomic_write(path, &png_bytes(DynamicImage::ImageLuma8(buf))?)
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> CliResult<()> {
    atomic_write(path, &ck.encode())
}

pub fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Checkpoint::decode(&bytes).map_err(|e| io_err(path, e))
}

/// One JSON-lines metrics record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub fold: usize,
    pub domain: String,
    pub split: String,
    pub n_episodes: usize,
    pub per_class_iou: BTreeMap<u32, f64>,
    pub miou: f64,
    pub seed: u64,
    pub config_hash: String,
}

impl MetricsLine {
    pub fn new(report: &MetricsReport, seed: u64, config_hash: &str) -> Self {
        MetricsLine {
            fold: report.fold_index,
            domain: report.domain.as_str().into(),
            split: report.split.as_str().into(),
            n_episodes: report.n_episodes,
            per_class_iou: report.per_class_iou.clone(),
            miou: report.miou,
            seed,
            config_hash: config_hash.into(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Appends lines to a JSON-lines file, rewriting it atomically.
pub fn append_lines(path: &Path, lines: &[String]) -> CliResult<()> {
    let mut text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(io_err(path, e)),
    };
    if !text.is_empty() && !text.ends_with('\n') {
        text.push('\n');
    }
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    atomic_write(path, text.as_bytes())
}

pub fn read_metrics(path: &Path) -> CliResult<Vec<MetricsLine>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| io_err(path, e)))
        .collect()
}
