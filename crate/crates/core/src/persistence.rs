//! Weight stores and image files.
//!
//! # Store layout
//!
//! ```text
//! <manifest byte length, ASCII decimal>\n
//! <manifest: one line of UTF-8 JSON>\n
//! <payload: little-endian IEEE-754 values, entries back to back>
//! ```
//!
//! The manifest is `{"format":"alen-store","version":1,"entries":[...]}`
//! where each entry is `{"name","dtype","shape","byte_offset","byte_len"}`
//! and offsets are relative to the first payload byte. Entries appear in
//! insertion order and their ranges must tile the payload exactly.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const FORMAT_TAG: &str = "alen-store";
const FORMAT_VERSION: u32 = 1;

/// Ordered map from parameter name to tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensorStore<S: Scalar = f64> {
    entries: Vec<(String, Tensor<S>)>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Default for NamedTensorStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> NamedTensorStore<S> {
    pub fn new() -> Self {
        NamedTensorStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Appends an entry; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Store(format!("duplicate entry `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    /// Looks up `name` and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&Tensor<S>> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))?;
        if t.shape() != shape {
            return Err(Error::ParameterShape {
                name: name.to_string(),
                expected: shape.to_vec(),
                actual: t.shape().to_vec(),
            });
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total number of scalars across all entries.
    pub fn parameter_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut manifest = Vec::with_capacity(self.entries.len());
        for (name, t) in &self.entries {
            let offset = payload.len();
            for &v in t.data() {
                v.write_le(&mut payload);
            }
            manifest.push(ManifestEntry {
                name: name.clone(),
                dtype: S::DTYPE.to_string(),
                shape: t.shape().to_vec(),
                byte_offset: offset as u64,
                byte_len: (payload.len() - offset) as u64,
            });
        }
        let header = serde_json::to_string(&Manifest {
            format: FORMAT_TAG.to_string(),
            version: FORMAT_VERSION,
            entries: manifest,
        })
        .expect("manifest serializes");
        let mut out = Vec::with_capacity(header.len() + payload.len() + 24);
        out.extend_from_slice(format!("{}\n", header.len()).as_bytes());
        out.extend_from_slice(header.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Store("missing manifest length line".into()))?;
        let len: usize = std::str::from_utf8(&bytes[..nl])
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Store("manifest length is not a decimal integer".into()))?;
        let start = nl + 1;
        if bytes.len() < start + len + 1 || bytes[start + len] != b'\n' {
            return Err(Error::Store("manifest truncated".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[start..start + len])
            .map_err(|e| Error::Store(format!("manifest JSON: {e}")))?;
        if manifest.format != FORMAT_TAG || manifest.version != FORMAT_VERSION {
            return Err(Error::Store(format!(
                "unrecognized format {} v{}",
                manifest.format, manifest.version
            )));
        }
        let payload = &bytes[start + len + 1..];
        let mut store = NamedTensorStore::new();
        let mut expected_offset = 0u64;
        for e in manifest.entries {
            if e.dtype != S::DTYPE {
                return Err(Error::Store(format!(
                    "entry `{}` has dtype {}, expected {}",
                    e.name,
                    e.dtype,
                    S::DTYPE
                )));
            }
            let numel: usize = e.shape.iter().product();
            if e.byte_len != (numel * S::BYTES) as u64 {
                return Err(Error::Store(format!(
                    "entry `{}`: byte_len {} does not match shape {:?}",
                    e.name, e.byte_len, e.shape
                )));
            }
            if e.byte_offset != expected_offset {
                return Err(Error::Store(format!(
                    "entry `{}`: byte_offset {} overlaps or leaves a gap (expected {})",
                    e.name, e.byte_offset, expected_offset
                )));
            }
            let end = e.byte_offset + e.byte_len;
            if end > payload.len() as u64 {
                return Err(Error::Store(format!(
                    "entry `{}`: payload truncated ({} of {} bytes present)",
                    e.name,
                    (payload.len() as u64).saturating_sub(e.byte_offset),
                    e.byte_len
                )));
            }
            let raw = &payload[e.byte_offset as usize..end as usize];
            let data = raw.chunks_exact(S::BYTES).map(S::read_le).collect();
            store.insert(e.name.clone(), Tensor::new(e.shape, data)?)?;
            expected_offset = end;
        }
        if expected_offset != payload.len() as u64 {
            return Err(Error::Store(format!(
                "{} trailing payload bytes",
                payload.len() as u64 - expected_offset
            )));
        }
        Ok(store)
    }

    /// SHA-256 of the serialized form, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Converts every entry to another element type.
    pub fn cast<T: Scalar>(&self) -> NamedTensorStore<T> {
        let mut out = NamedTensorStore::new();
        for (n, t) in self.iter() {
            out.insert(n, t.cast()).expect("names already unique");
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    byte_offset: u64,
    byte_len: u64,
}

/// Writes `bytes` via a temporary sibling file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_store<S: Scalar>(store: &NamedTensorStore<S>, path: &Path) -> Result<()> {
    write_atomic(path, &store.to_bytes())
}

pub fn load_store<S: Scalar>(path: &Path) -> Result<NamedTensorStore<S>> {
    NamedTensorStore::from_bytes(&fs::read(path)?)
}

/// Reads an 8-bit RGB/RGBA PNG or a binary (P6) PPM.
pub fn load_image<S: Scalar>(path: &Path) -> Result<RgbImage<S>> {
    let bytes = fs::read(path)?;
    decode_image(&bytes, path)
}

pub fn decode_image<S: Scalar>(bytes: &[u8], path: &Path) -> Result<RgbImage<S>> {
    use image::{ColorType, ImageFormat};
    let decode_err = |e: image::ImageError| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let format = image::guess_format(bytes).map_err(|_| {
        Error::UnsupportedFormat(format!("{}: not a PNG or PPM file", path.display()))
    })?;
    match format {
        ImageFormat::Png => {}
        ImageFormat::Pnm if bytes.starts_with(b"P6") => {}
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "{}: {other:?} input (only 8-bit PNG and P6 PPM are read)",
                path.display()
            )))
        }
    }
    let img = image::load_from_memory_with_format(bytes, format).map_err(decode_err)?;
    let rgb = match img.color() {
        ColorType::Rgb8 => img.into_rgb8(),
        ColorType::Rgba8 => {
            log::warn!("{}: alpha channel dropped", path.display());
            img.into_rgb8()
        }
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "{}: {other:?} pixels (expected 8-bit RGB or RGBA)",
                path.display()
            )))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let full = S::from_f64(255.0).expect("255 representable");
    let raw = rgb.as_raw();
    RgbImage::from_fn(h, w, |c, y, x| {
        S::from_u8(raw[(y * w + x) * 3 + c]).expect("u8 representable") / full
    })
}

/// Quantizes to 8 bits (`round(v·255)`) and writes PNG, or binary PPM for a
/// `.ppm` extension.
pub fn save_image<S: Scalar>(img: &RgbImage<S>, path: &Path) -> Result<()> {
    let bytes = encode_image(img, path)?;
    write_atomic(path, &bytes)
}

pub fn quantize<S: Scalar>(img: &RgbImage<S>) -> Vec<u8> {
    let (h, w) = (img.height(), img.width());
    let mut raw = vec![0u8; h * w * 3];
    for c in 0..3 {
        for (i, &v) in img.channel(c).iter().enumerate() {
            let q = (v.to_f64().unwrap_or(0.0) * 255.0)
                .round()
                .clamp(0.0, 255.0);
            raw[i * 3 + c] = q as u8;
        }
    }
    raw
}

pub fn encode_image<S: Scalar>(img: &RgbImage<S>, path: &Path) -> Result<Vec<u8>> {
    let raw = quantize(img);
    let ppm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    if ppm {
        let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
        out.extend_from_slice(&raw);
        return Ok(out);
    }
    let mut out = Vec::new();
    let encoder = image::codecs::png::PngEncoder::new(&mut out);
    image::ImageEncoder::write_image(
        encoder,
        &raw,
        img.width() as u32,
        img.height() as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(out)
}
