//! Binary weight files.
//!
//! Layout: an 8-byte little-endian `u64` manifest length `N`, then `N` bytes
//! of JSON manifest, then the payload. The manifest maps each tensor name to
//! `{"dtype": "f32", "shape": [...], "data_offsets": [start, end]}` with
//! offsets relative to the payload start. Values are stored as little-endian
//! `f32` and widened to `f64` on load.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub type NamedTensors = BTreeMap<String, Tensor>;

const DTYPE_F32: &str = "f32";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Descriptor {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

pub fn encode_weights(tensors: &NamedTensors) -> Result<Vec<u8>> {
    let mut manifest = BTreeMap::new();
    let mut payload = Vec::new();
    for (name, t) in tensors {
        let start = payload.len() as u64;
        for &v in t.data() {
            let f = v as f32;
            if !f.is_finite() {
                return Err(Error::format(
                    Some(name),
                    format!("value {v} overflows f32"),
                ));
            }
            payload.extend_from_slice(&f.to_le_bytes());
        }
        manifest.insert(
            name.clone(),
            Descriptor {
                dtype: DTYPE_F32.into(),
                shape: t.shape().to_vec(),
                data_offsets: [start, payload.len() as u64],
            },
        );
    }
    let header = serde_json::to_vec(&manifest)
        .map_err(|e| Error::format(None, format!("manifest serialization: {e}")))?;
    let mut out = Vec::with_capacity(8 + header.len() + payload.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_weights(bytes: &[u8]) -> Result<NamedTensors> {
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::format(None, "file shorter than the 8-byte length prefix"))?;
    let header_len = u64::from_le_bytes(len_bytes);
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(8))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::format(None, format!("manifest length {header_len} exceeds file")))?;
    let manifest: BTreeMap<String, Descriptor> = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| Error::format(None, format!("manifest is not valid: {e}")))?;
    let payload = &bytes[header_end..];

    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(manifest.len());
    for (name, d) in &manifest {
        if d.dtype != DTYPE_F32 {
            return Err(Error::format(
                Some(name),
                format!("unknown dtype '{}'", d.dtype),
            ));
        }
        let [start, end] = d.data_offsets;
        if start > end {
            return Err(Error::format(Some(name), "data_offsets are reversed"));
        }
        let numel: u64 = d.shape.iter().map(|&s| s as u64).product();
        if d.shape.contains(&0) || numel * 4 != end - start {
            return Err(Error::format(
                Some(name),
                format!(
                    "shape {:?} does not match {} payload bytes",
                    d.shape,
                    end - start
                ),
            ));
        }
        if end > payload.len() as u64 {
            return Err(Error::format(
                Some(name),
                format!(
                    "payload truncated: needs {end} bytes, have {}",
                    payload.len()
                ),
            ));
        }
        spans.push((start, end, name));
    }
    spans.sort_unstable();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(Error::format(
                Some(pair[1].2),
                format!("data overlaps tensor '{}'", pair[0].2),
            ));
        }
    }
    let covered = spans.last().map_or(0, |s| s.1);
    if covered != payload.len() as u64 {
        return Err(Error::format(
            None,
            format!("{} trailing payload bytes", payload.len() as u64 - covered),
        ));
    }

    let mut out = NamedTensors::new();
    for (name, d) in manifest {
        let [start, end] = d.data_offsets;
        let data: Vec<f64> = payload[start as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t =
            Tensor::new(d.shape, data).map_err(|e| Error::format(Some(&name), e.to_string()))?;
        out.insert(name, t);
    }
    Ok(out)
}

pub fn save_weights(path: impl AsRef<Path>, tensors: &NamedTensors) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_weights(tensors)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<NamedTensors> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}
