//! Checkpoint files: one magic line, one JSON header line, then raw
//! little-endian payloads in order params (f64), buffers (f64), optional mask
//! (one byte per entry), optional signs (one signed byte per entry).

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ticketlab_core::engine::{Layout, Segment};
use ticketlab_core::{BinaryMask, ModelSpec, NormBuffers, ParamVector, SignedMask};

use crate::error::{HarnessError, Result};
use crate::output::write_atomic;

pub const MAGIC: &str = "TICKETLAB-CKPT 1";
const DTYPE: &str = "f64-le";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    /// What produced the checkpoint, e.g. `pipeline:aws` or `solution:dense`.
    pub origin: String,
    pub init_seed: Option<u64>,
    pub sgd_seed: Option<u64>,
    pub trial: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    spec: ModelSpec,
    d: usize,
    segments: Vec<Segment>,
    buffer_len: usize,
    has_mask: bool,
    has_signs: bool,
    provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamVector,
    pub buffers: NormBuffers,
    pub mask: Option<BinaryMask>,
    pub signs: Option<SignedMask>,
    pub provenance: Provenance,
}

impl Checkpoint {
    pub fn new(params: ParamVector, buffers: NormBuffers) -> Self {
        Self {
            params,
            buffers,
            mask: None,
            signs: None,
            provenance: Provenance::default(),
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        self.params.spec()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.params.len();
        let buffers = self.buffers.flatten();
        let header = Header {
            dtype: DTYPE.into(),
            spec: self.spec().clone(),
            d,
            segments: self.params.layout().segments().to_vec(),
            buffer_len: buffers.len(),
            has_mask: self.mask.is_some(),
            has_signs: self.signs.is_some(),
            provenance: self.provenance.clone(),
        };
        let mut out = Vec::with_capacity(64 + 8 * (d + buffers.len()) + 2 * d);
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        out.extend(serde_json::to_vec(&header).expect("header serializes"));
        out.push(b'\n');
        for v in self.params.values().iter().chain(&buffers) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(m) = &self.mask {
            out.extend(m.bits().iter().map(|&b| u8::from(b)));
        }
        if let Some(s) = &self.signs {
            out.extend(s.signs().iter().map(|&s| s as u8));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| HarnessError::format(path, msg);
        let magic_end = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing checkpoint magic line".into()))?;
        if &bytes[..magic_end] != MAGIC.as_bytes() {
            return Err(bad("not a ticketlab checkpoint (bad magic line)".into()));
        }
        let rest = &bytes[magic_end + 1..];
        let header_end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing checkpoint header".into()))?;
        let header: Header =
            serde_json::from_slice(&rest[..header_end]).map_err(|e| bad(format!("bad checkpoint header: {e}")))?;
        if header.dtype != DTYPE {
            return Err(bad(format!("unsupported dtype {}", header.dtype)));
        }
        let layout = Layout::new(&header.spec).map_err(|e| bad(e.to_string()))?;
        if layout.len() != header.d || layout.segments() != header.segments.as_slice() {
            return Err(bad("header layout does not match its model spec".into()));
        }
        let d = header.d;
        let payload = &rest[header_end + 1..];
        let expected = 8 * (d + header.buffer_len)
            + if header.has_mask { d } else { 0 }
            + if header.has_signs { d } else { 0 };
        if payload.len() != expected {
            return Err(bad(format!(
                "payload is {} bytes, header declares {expected}",
                payload.len()
            )));
        }
        let floats: Vec<f64> = payload[..8 * (d + header.buffer_len)]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let params = ParamVector::new(Arc::new(layout), floats[..d].to_vec())?;
        let buffers = NormBuffers::unflatten(&header.spec, &floats[d..]).map_err(|e| bad(e.to_string()))?;
        let mut pos = 8 * (d + header.buffer_len);
        let mask = if header.has_mask {
            let raw = &payload[pos..pos + d];
            pos += d;
            if raw.iter().any(|&b| b > 1) {
                return Err(bad("mask payload contains values other than 0 and 1".into()));
            }
            let template = BinaryMask::dense(params.layout());
            let bits = raw.iter().map(|&b| b == 1).collect();
            Some(BinaryMask::from_parts(bits, template.prunable().to_vec()).map_err(|e| bad(e.to_string()))?)
        } else {
            None
        };
        let signs = if header.has_signs {
            let raw = &payload[pos..pos + d];
            Some(SignedMask::from_signs(raw.iter().map(|&b| b as i8).collect()).map_err(|e| bad(e.to_string()))?)
        } else {
            None
        };
        Ok(Self {
            params,
            buffers,
            mask,
            signs,
            provenance: header.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Short digest of a model layout, for mismatch diagnostics.
pub fn layout_digest(spec: &ModelSpec) -> String {
    let json = serde_json::to_vec(spec).expect("spec serializes");
    hex::encode(&Sha256::digest(&json)[..8])
}

/// SHA-256 of the little-endian parameter bytes.
pub fn params_checksum(params: &ParamVector) -> String {
    let mut h = Sha256::new();
    for v in params.values() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}
