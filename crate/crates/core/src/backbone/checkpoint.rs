//! Named-tensor checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "IFWM"
//! version  u32      1
//! records, repeated until end of file:
//!   name_len u32
//!   name     name_len bytes, UTF-8
//!   extents  4 × u32  (n, c, h, w)
//!   payload  n·c·h·w × f64
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::Network;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"IFWM";
pub const VERSION: u32 = 1;

pub fn encode<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        for d in t.shape().dims() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Parses checkpoint bytes into `(name, tensor)` records in file order.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bad = |detail: &str| Error::Format {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4) != Some(&MAGIC[..]) {
        return Err(bad("missing IFWM magic"));
    }
    match r.u32() {
        Some(VERSION) => {}
        Some(v) => return Err(bad(&format!("unsupported version {v}"))),
        None => return Err(bad("truncated header")),
    }
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32().ok_or_else(|| bad("truncated record"))? as usize;
        let name = r.take(len).ok_or_else(|| bad("truncated name"))?;
        let name = std::str::from_utf8(name)
            .map_err(|_| bad("tensor name is not UTF-8"))?
            .to_string();
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32().ok_or_else(|| bad("truncated extents"))? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let payload = r
            .take(shape.numel() * 8)
            .ok_or_else(|| bad(&format!("truncated payload for {name}")))?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::from_vec(shape, data)?));
    }
    Ok(out)
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    let tensors = net.tensors();
    let bytes = encode(tensors.iter().map(|(n, t)| (n.as_str(), *t)));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Copies `records` into `net`. Names and extents must match the network's
/// registry exactly; otherwise the error lists every difference.
pub fn apply(net: &mut Network, records: Vec<(String, Tensor)>) -> Result<()> {
    let mut incoming: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut diff = Vec::new();
    for (name, t) in records {
        if incoming.insert(name.clone(), t).is_some() {
            diff.push(format!("  duplicate: {name}"));
        }
    }
    let mut targets = net.tensors_mut();
    for (name, t) in &targets {
        match incoming.get(name) {
            None => diff.push(format!("  missing: {name} {}", t.shape())),
            Some(src) if src.shape() != t.shape() => diff.push(format!(
                "  shape: {name} network {} checkpoint {}",
                t.shape(),
                src.shape()
            )),
            Some(_) => {}
        }
    }
    for name in incoming.keys() {
        if !targets.iter().any(|(n, _)| n == name) {
            diff.push(format!("  unexpected: {name}"));
        }
    }
    if !diff.is_empty() {
        return Err(Error::CheckpointMismatch(diff.join("\n")));
    }
    for (name, t) in &mut targets {
        let src = &incoming[name.as_str()];
        t.data_mut().copy_from_slice(src.data());
        t.zero_grad();
    }
    Ok(())
}

pub fn load(net: &mut Network, path: &Path) -> Result<()> {
    apply(net, read(path)?)
}
