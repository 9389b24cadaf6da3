//! Mask files (`MASK` container).
//!
//! Header: dimension, budget K, role, tag, base-checkpoint fingerprint,
//! entry count and scoring-head width (0 when absent). Payload: the sorted
//! indices as u64, the deltas as f64, then the optional head.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MaskRole, SparseMask};
use crate::artifact::{self, Kind, PayloadReader, PayloadWriter};
use crate::encoder::ScoreHead;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MaskFile {
    pub mask: SparseMask,
    pub base_fingerprint: String,
    /// Scoring head trained alongside a ranking mask.
    pub head: Option<ScoreHead>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dim: usize,
    k: usize,
    role: MaskRole,
    tag: String,
    base_fingerprint: String,
    count: usize,
    head_width: usize,
}

impl MaskFile {
    /// Conventional file name, e.g. `LM-tgt-k2320.mask`.
    pub fn file_name(role: MaskRole, tag: &str, k: usize) -> String {
        let role = match role {
            MaskRole::Language => "LM",
            MaskRole::Ranking => "RM",
        };
        format!("{role}-{tag}-k{k}.mask")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.mask.validate()?;
        let m = &self.mask;
        let header = Header {
            dim: m.dim,
            k: m.k,
            role: m.role,
            tag: m.tag.clone(),
            base_fingerprint: self.base_fingerprint.clone(),
            count: m.len(),
            head_width: self.head.as_ref().map_or(0, |h| h.weight.len()),
        };
        let mut w = PayloadWriter::default();
        for &i in &m.indices {
            w.u64(i as u64);
        }
        w.f64s(&m.values);
        if let Some(h) = &self.head {
            w.f64s(&h.to_flat());
        }
        artifact::encode(Kind::Mask, &header, &w.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, payload): (Header, _) = artifact::decode(Kind::Mask, bytes)?;
        let mut r = PayloadReader::new(payload);
        let indices = (0..h.count)
            .map(|_| r.u64().map(|i| i as usize))
            .collect::<Result<Vec<_>>>()?;
        let values = r.f64s(h.count)?;
        let head = if h.head_width > 0 {
            Some(ScoreHead::from_flat(
                h.head_width,
                &r.f64s(h.head_width + 1)?,
            )?)
        } else {
            None
        };
        r.finish()?;
        let mask = SparseMask {
            dim: h.dim,
            k: h.k,
            role: h.role,
            tag: h.tag,
            indices,
            values,
        };
        mask.validate()
            .map_err(|e| Error::format("mask file", e.to_string()))?;
        Ok(Self {
            mask,
            base_fingerprint: h.base_fingerprint,
            head,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Refuses masks extracted against a different base checkpoint.
    pub fn check_base(&self, base_fingerprint: &str) -> Result<()> {
        if self.base_fingerprint != base_fingerprint {
            return Err(Error::FingerprintMismatch {
                base: base_fingerprint.to_string(),
                artifact: self.base_fingerprint.clone(),
            });
        }
        Ok(())
    }
}
