//! Histogram-based global/local labeling.
//!
//! An image is converted to 8-bit luma and its histogram scanned for the
//! brightest intensity that still holds at least `T` pixels. If that
//! intensity sits at or below the cutoff, the pixel mass is confined to the
//! dark side and the image is labeled global; otherwise it is local.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::{GrayImage, RgbImage};
use crate::persistence::load_image;
use crate::route::Route;
use crate::scalar::Scalar;

/// Minimum bin count, absolute or as a fraction of the pixel count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Threshold {
    Count(u64),
    Fraction(f64),
}

impl Threshold {
    /// Absolute count for an image of `pixels` pixels (at least 1).
    pub fn resolve(self, pixels: usize) -> u64 {
        match self {
            Threshold::Count(t) => t.max(1),
            Threshold::Fraction(f) => ((f * pixels as f64).round() as u64).max(1),
        }
    }
}

impl std::str::FromStr for Threshold {
    type Err = Error;

    /// Integers are counts; anything with a decimal point or exponent is a fraction.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::InvalidArgument(format!(
                "threshold `{s}` is neither a count ≥ 1 nor a fraction in (0,1]"
            ))
        };
        if let Ok(n) = s.parse::<u64>() {
            return if n >= 1 {
                Ok(Threshold::Count(n))
            } else {
                Err(bad())
            };
        }
        match s.parse::<f64>() {
            Ok(f) if f > 0.0 && f <= 1.0 => Ok(Threshold::Fraction(f)),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelerConfig {
    pub threshold: Threshold,
    pub intensity_cutoff: u8,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        LabelerConfig {
            threshold: Threshold::Fraction(0.001),
            intensity_cutoff: 128,
        }
    }
}

/// Rec. 601 luma scaled to `[0,255]`, rounded half away from zero.
pub fn to_grayscale<S: Scalar>(img: &RgbImage<S>) -> GrayImage {
    let (r, g, b) = (img.channel(0), img.channel(1), img.channel(2));
    let data = (0..r.len())
        .map(|i| {
            let (r, g, b) = (
                r[i].to_f64().unwrap_or(0.0),
                g[i].to_f64().unwrap_or(0.0),
                b[i].to_f64().unwrap_or(0.0),
            );
            let y = (0.299 * r + 0.587 * g + 0.114 * b) * 255.0;
            y.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    GrayImage::new(img.height(), img.width(), data).expect("same pixel count")
}

pub fn histogram(img: &GrayImage) -> [u64; 256] {
    let mut counts = [0u64; 256];
    for &p in img.pixels() {
        counts[p as usize] += 1;
    }
    counts
}

/// Largest intensity whose bin holds at least `t` pixels.
pub fn threshold_intensity(counts: &[u64; 256], t: u64) -> Option<u8> {
    (0..=255u8).rev().find(|&i| counts[i as usize] >= t)
}

/// Route implied by a threshold intensity; `None` counts as dark.
pub fn route_for(i_thr: Option<u8>, cutoff: u8) -> Route {
    match i_thr {
        Some(i) if i > cutoff => Route::Local,
        _ => Route::Global,
    }
}

/// Labels one image, returning the route and its threshold intensity.
pub fn label<S: Scalar>(img: &RgbImage<S>, cfg: &LabelerConfig) -> (Route, Option<u8>) {
    let gray = to_grayscale(img);
    let t = cfg.threshold.resolve(gray.height() * gray.width());
    let i_thr = threshold_intensity(&histogram(&gray), t);
    (route_for(i_thr, cfg.intensity_cutoff), i_thr)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelRow {
    pub path: PathBuf,
    pub label: Route,
    pub i_thr: Option<u8>,
}

#[derive(Debug, Default)]
pub struct LabelManifest {
    pub rows: Vec<LabelRow>,
    /// Files that could not be decoded, with the reason.
    pub failures: Vec<(PathBuf, String)>,
}

impl LabelManifest {
    /// CSV with header `path,label,i_thr`; a missing threshold is written as `none`.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(["path", "label", "i_thr"])?;
        for r in &self.rows {
            let i_thr = r
                .i_thr
                .map_or_else(|| "none".to_string(), |i| i.to_string());
            w.write_record([r.path.to_string_lossy().as_ref(), r.label.as_str(), &i_thr])?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

/// Regular files directly inside `dir` with a PNG or PPM extension, sorted by path.
pub fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm"));
        if path.is_file() && is_image {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Labels every image in `dir`; undecodable files are recorded and skipped.
pub fn label_dataset(dir: &Path, cfg: &LabelerConfig) -> Result<LabelManifest> {
    let mut manifest = LabelManifest::default();
    for path in image_files(dir)? {
        match load_image::<f64>(&path) {
            Ok(img) => {
                let (label, i_thr) = label(&img, cfg);
                manifest.rows.push(LabelRow { path, label, i_thr });
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                manifest.failures.push((path, e.to_string()));
            }
        }
    }
    Ok(manifest)
}
