//! RAST v1 raster files and dataset manifests.
//!
//! A raster file is one ASCII header line followed by a row-major,
//! little-endian payload of `c·h·w` scalars:
//!
//! ```text
//! RAST v1 <c> <h> <w> <dtype>\n
//! ```
//!
//! `dtype` is `u8` (labels), `f32` or `f64` (images). A manifest lists one
//! sample per line as `image_path<TAB>label_path`; relative paths resolve
//! against the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use super::SceneSample;
use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum RasterData {
    U8(Vec<u8>),
    F64(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: RasterData,
}

fn header(c: usize, h: usize, w: usize, dtype: &str) -> Vec<u8> {
    format!("RAST v1 {c} {h} {w} {dtype}\n").into_bytes()
}

/// Encodes a single-item image tensor as `f64`.
pub fn encode_image(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.n != 1 {
        return Err(Error::geometry("raster", format!("expected one image, got {s}")));
    }
    let mut buf = header(s.c, s.h, s.w, "f64");
    for v in image.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn encode_labels(labels: &LabelMap) -> Result<Vec<u8>> {
    let (n, h, w) = labels.dims();
    if n != 1 {
        return Err(Error::geometry("raster", format!("expected one label map, got {n}")));
    }
    let mut buf = header(1, h, w, "u8");
    buf.extend_from_slice(labels.data());
    Ok(buf)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Raster> {
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let end = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let line = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not ASCII".into()))?;
    let fields: Vec<&str> = line.split(' ').collect();
    let [magic, version, c, h, w, dtype] = fields[..] else {
        return Err(bad(format!("malformed header '{line}'")));
    };
    if magic != "RAST" || version != "v1" {
        return Err(bad(format!("unsupported header '{line}'")));
    }
    let dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| bad(format!("bad extent '{s}'")))
    };
    let (c, h, w) = (dim(c)?, dim(h)?, dim(w)?);
    let payload = &bytes[end + 1..];
    let count = c * h * w;
    let width = match dtype {
        "u8" => 1,
        "f32" => 4,
        "f64" => 8,
        other => return Err(bad(format!("unknown dtype '{other}'"))),
    };
    if payload.len() != count * width {
        return Err(bad(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            count * width
        )));
    }
    let data = match dtype {
        "u8" => RasterData::U8(payload.to_vec()),
        "f32" => RasterData::F64(
            payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
        ),
        _ => RasterData::F64(
            payload
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        ),
    };
    Ok(Raster {
        channels: c,
        height: h,
        width: w,
        data,
    })
}

pub fn read(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let r = read(path)?;
    match r.data {
        RasterData::F64(d) => Tensor::from_vec(Shape::new(1, r.channels, r.height, r.width), d),
        RasterData::U8(_) => Err(Error::Format {
            path: path.to_path_buf(),
            detail: "expected a floating-point image".into(),
        }),
    }
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let r = read(path)?;
    match r.data {
        RasterData::U8(d) if r.channels == 1 => LabelMap::new(1, r.height, r.width, d),
        _ => Err(Error::Format {
            path: path.to_path_buf(),
            detail: "expected a single-channel u8 label raster".into(),
        }),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    write(path, &encode_image(image)?)
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    write(path, &encode_labels(labels)?)
}

/// Sample list backing a dataset on disk.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<(PathBuf, PathBuf)>,
}

impl Manifest {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new(""));
        let mut entries = Vec::new();
        for (no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (image, labels) = line.split_once('\t').ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                detail: format!("line {}: expected image<TAB>labels", no + 1),
            })?;
            entries.push((base.join(image), base.join(labels)));
        }
        Ok(Manifest { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Writes entries relative to the manifest's directory when possible.
    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let rel = |p: &Path| -> String {
            p.strip_prefix(base)
                .unwrap_or(p)
                .to_string_lossy()
                .into_owned()
        };
        let mut text = String::new();
        for (i, l) in &self.entries {
            text.push_str(&format!("{}\t{}\n", rel(i), rel(l)));
        }
        write(path, text.as_bytes())
    }

    /// Loads every sample, checking labels against `num_classes`.
    pub fn load(&self, num_classes: usize) -> Result<Vec<SceneSample>> {
        self.entries
            .iter()
            .map(|(i, l)| {
                let sample = SceneSample::new(read_image(i)?, read_labels(l)?)?;
                sample
                    .labels
                    .validate(num_classes)
                    .map_err(|e| Error::Data(format!("{}: {e}", l.display())))?;
                Ok(sample)
            })
            .collect()
    }
}
