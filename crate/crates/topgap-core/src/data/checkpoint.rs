//! Binary model checkpoints: a magic tag, a JSON header describing the
//! architecture and tensor table, then raw little-endian f32 payload.
//! Serialization is canonical, so saving the same model twice yields
//! byte-identical files and a round trip is bit-exact.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::{BackboneConfig, HeadConfig, ModelParams};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"TGCP";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    byte_offset: u64,
    byte_len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    backbone: BackboneConfig,
    head: HeadConfig,
    seed: u64,
    trainable: Vec<String>,
    summary: BTreeMap<String, serde_json::Value>,
    tensors: BTreeMap<String, TensorEntry>,
}

/// Writes the model plus a free-form summary (metrics, provenance of the
/// training run) to `path`.
pub fn save_checkpoint(
    params: &ModelParams<f32>,
    summary: &BTreeMap<String, serde_json::Value>,
    path: &Path,
) -> Result<()> {
    let mut entries = BTreeMap::new();
    let mut offset = 0u64;
    for (name, t) in params.tensors() {
        let byte_len = (t.numel() * 4) as u64;
        entries.insert(
            name.clone(),
            TensorEntry {
                dtype: "f32".to_string(),
                shape: t.shape().to_vec(),
                byte_offset: offset,
                byte_len,
            },
        );
        offset += byte_len;
    }
    let header = Header {
        backbone: params.backbone.clone(),
        head: params.head.clone(),
        seed: params.seed,
        trainable: params.trainable_names().map(str::to_string).collect(),
        summary: summary.clone(),
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())?;
    w.write_all(&header_json)?;
    // BTreeMap iteration matches the offsets assigned above.
    for t in params.tensors().values() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint back; validates magic, version, tensor table, and
/// architecture consistency before returning.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams<f32>, BTreeMap<String, serde_json::Value>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{} is not a model checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, this build reads {VERSION}"
        )));
    }
    let mut long = [0u8; 8];
    r.read_exact(&mut long)?;
    let header_len = u64::from_le_bytes(long) as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)?;

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;

    let mut tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for (name, e) in &header.tensors {
        if e.dtype != "f32" {
            return Err(Error::Format(format!(
                "tensor '{name}' has dtype {}, this build reads f32",
                e.dtype
            )));
        }
        let numel: usize = e.shape.iter().product();
        if e.byte_len as usize != numel * 4 {
            return Err(Error::Format(format!(
                "tensor '{name}' declares {} bytes for shape {:?}",
                e.byte_len, e.shape
            )));
        }
        let start = e.byte_offset as usize;
        let end = start
            .checked_add(e.byte_len as usize)
            .filter(|&end| end <= payload.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "tensor '{name}' overruns the payload ({} bytes)",
                    payload.len()
                ))
            })?;
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.insert(name.clone(), Tensor::from_vec(&e.shape, data)?);
    }

    let trainable: BTreeSet<String> = header.trainable.into_iter().collect();
    for name in &trainable {
        if !tensors.contains_key(name) {
            return Err(Error::Format(format!(
                "trainable list names unknown tensor '{name}'"
            )));
        }
    }
    let params = ModelParams::from_parts(header.backbone, header.head, header.seed, tensors, trainable)?;
    Ok((params, header.summary))
}
