//! On-disk container shared by base checkpoints, adapter files and mask files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "MODRANK\0"
//! kind     4 bytes  ASCII tag: "BASE", "ADPT" or "MASK"
//! version  u32      currently 1
//! hlen     u64      length of the JSON header in bytes
//! header   hlen bytes of UTF-8 JSON
//! payload  remaining bytes; f64 values as IEEE-754 LE, indices as u64 LE
//! ```
//!
//! Floating-point data never goes through JSON, so files round-trip
//! bit-exactly. Writes go to a temporary sibling that is then renamed.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MODRANK\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Base,
    Adapter,
    Mask,
}

impl Kind {
    fn tag(self) -> &'static [u8; 4] {
        match self {
            Kind::Base => b"BASE",
            Kind::Adapter => b"ADPT",
            Kind::Mask => b"MASK",
        }
    }
}

/// Appends values to a little-endian payload.
#[derive(Debug, Default)]
pub struct PayloadWriter {
    bytes: Vec<u8>,
}

impl PayloadWriter {
    pub fn f64s(&mut self, values: &[f64]) {
        for v in values {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

/// Sequential reader over a payload.
#[derive(Debug)]
pub struct PayloadReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PayloadReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take8(&mut self) -> Result<[u8; 8]> {
        let end = self.pos + 8;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::format("artifact payload", "truncated"))?;
        self.pos = end;
        Ok(chunk.try_into().expect("8 bytes"))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take8()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take8()?))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                "artifact payload",
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub fn encode<H: Serialize>(kind: Kind, header: &H, payload: &[u8]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(24 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(kind.tag());
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(payload);
    Ok(out)
}

pub fn decode<H: DeserializeOwned>(kind: Kind, bytes: &[u8]) -> Result<(H, &[u8])> {
    let bad = |d: &str| Error::format("artifact", d.to_string());
    if bytes.len() < 24 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic bytes"));
    }
    if &bytes[8..12] != kind.tag() {
        return Err(bad(&format!(
            "expected a {:?} artifact, found tag {:?}",
            kind,
            String::from_utf8_lossy(&bytes[8..12])
        )));
    }
    let version = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
    let header_bytes = bytes
        .get(24..24 + hlen)
        .ok_or_else(|| bad("truncated header"))?;
    let header = serde_json::from_slice(header_bytes)?;
    Ok((header, &bytes[24 + hlen..]))
}

/// Writes `bytes` to `path` through a temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::contract(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Hex SHA-256 prefix used to tie artifacts to a base checkpoint.
pub fn fingerprint(parts: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update((p.len() as u64).to_le_bytes());
        hasher.update(p);
    }
    hasher
        .finalize()
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn f64_bytes(values: &[f64]) -> Vec<u8> {
    let mut w = PayloadWriter::default();
    w.f64s(values);
    w.into_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_payload_round_trip() {
        let mut w = PayloadWriter::default();
        w.f64s(&[1.5, -0.0, f64::MIN_POSITIVE]);
        w.u64(42);
        let bytes = encode(Kind::Mask, &vec!["x".to_string()], &w.into_bytes()).unwrap();
        let (h, payload): (Vec<String>, _) = decode(Kind::Mask, &bytes).unwrap();
        assert_eq!(h, vec!["x"]);
        let mut r = PayloadReader::new(payload);
        let v = r.f64s(3).unwrap();
        assert_eq!(v[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(r.u64().unwrap(), 42);
        r.finish().unwrap();
        assert!(decode::<Vec<String>>(Kind::Base, &bytes).is_err());
    }

    #[test]
    fn fingerprint_is_sensitive_to_boundaries() {
        assert_ne!(fingerprint(&[b"ab", b"c"]), fingerprint(&[b"a", b"bc"]));
        assert_eq!(fingerprint(&[b"ab"]).len(), 16);
    }
}
