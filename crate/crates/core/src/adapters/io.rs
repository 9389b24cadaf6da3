//! Adapter checkpoint files (`ADPT` container).
//!
//! Header: role, tag, adapter config, layer count, whether invertible
//! adapters are present, the base-checkpoint fingerprint and whether a
//! scoring head follows. Payload: every tensor of
//! [`AdapterParams::tensors`] in order, then the scoring head (`h` weights
//! and one bias) if present.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdapterConfig, AdapterParams, AdapterRole, Bottleneck, InvertibleAdapterParams};
use crate::artifact::{self, Kind, PayloadReader, PayloadWriter};
use crate::encoder::ScoreHead;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterFile {
    pub params: AdapterParams,
    pub base_fingerprint: String,
    /// Scoring head trained jointly with a ranking adapter.
    pub head: Option<ScoreHead>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    role: AdapterRole,
    tag: String,
    config: AdapterConfig,
    num_layers: usize,
    invertible: bool,
    base_fingerprint: String,
    has_head: bool,
}

impl AdapterFile {
    /// Conventional file name, e.g. `LA-tgt-r16.adapter`.
    pub fn file_name(role: AdapterRole, tag: &str, reduction_factor: usize) -> String {
        let role = match role {
            AdapterRole::Language => "LA",
            AdapterRole::Ranking => "RA",
        };
        format!("{role}-{tag}-r{reduction_factor}.adapter")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let p = &self.params;
        let header = Header {
            role: p.role,
            tag: p.tag.clone(),
            config: p.config.clone(),
            num_layers: p.layers.len(),
            invertible: p.invertible.is_some(),
            base_fingerprint: self.base_fingerprint.clone(),
            has_head: self.head.is_some(),
        };
        let mut w = PayloadWriter::default();
        for t in p.tensors() {
            w.f64s(t.data());
        }
        if let Some(head) = &self.head {
            w.f64s(&head.to_flat());
        }
        artifact::encode(Kind::Adapter, &header, &w.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, payload): (Header, _) = artifact::decode(Kind::Adapter, bytes)?;
        h.config.validate()?;
        let hidden = h.config.hidden;
        let d = h.config.bottleneck();
        let mut r = PayloadReader::new(payload);
        let mut read = |shape: Vec<usize>| -> Result<Tensor> {
            let n = shape.iter().product();
            Ok(Tensor::new(shape, r.f64s(n)?)?)
        };
        let mut bottleneck = |width: usize, d: usize| -> Result<Bottleneck> {
            Ok(Bottleneck {
                down: read(vec![width, d])?,
                down_bias: read(vec![d])?,
                up: read(vec![d, width])?,
                up_bias: read(vec![width])?,
            })
        };
        let layers = (0..h.num_layers)
            .map(|_| bottleneck(hidden, d))
            .collect::<Result<Vec<_>>>()?;
        let invertible = if h.invertible {
            let half = hidden / 2;
            let width = (half / 2).max(1);
            Some(InvertibleAdapterParams {
                f: bottleneck(half, width)?,
                g: bottleneck(half, width)?,
            })
        } else {
            None
        };
        let head = if h.has_head {
            Some(ScoreHead::from_flat(hidden, &r.f64s(hidden + 1)?)?)
        } else {
            None
        };
        r.finish()?;
        Ok(Self {
            params: AdapterParams {
                config: h.config,
                role: h.role,
                tag: h.tag,
                layers,
                invertible,
            },
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

    /// Refuses adapters built against a different base checkpoint.
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
