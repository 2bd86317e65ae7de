//! Checkpoint file format: magic bytes, a version word, a JSON manifest
//! (architecture, tensor names and shapes, frozen flags), then raw
//! little-endian f64 payloads in manifest order. Round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{init_params, EncoderConfig, FrozenFlags, Group, ModelParams, TensorKind};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MRCK";
const VERSION: u32 = 1;
const MAX_META_BYTES: u64 = 16 << 20;

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    group: Group,
    kind: TensorKind,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: EncoderConfig,
    input_channels: usize,
    num_classes: usize,
    frozen: FrozenFlags,
    tensors: Vec<TensorMeta>,
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let tensors = params.tensors();
    let meta = Meta {
        config: params.cfg,
        input_channels: params.input_channels,
        num_classes: params.num_classes,
        frozen: params.frozen,
        tensors: tensors
            .iter()
            .map(|t| TensorMeta {
                name: t.name.clone(),
                group: t.group,
                kind: t.kind,
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let meta_bytes = serde_json::to_vec(&meta)
        .map_err(|e| Error::Format(format!("checkpoint manifest encoding failed: {e}")))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(meta_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&meta_bytes)?;
    for t in &tensors {
        for v in t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("checkpoint truncated while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic bytes")?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    read_exact(&mut r, &mut word, "version")?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let mut len_bytes = [0u8; 8];
    read_exact(&mut r, &mut len_bytes, "manifest length")?;
    let meta_len = u64::from_le_bytes(len_bytes);
    if meta_len > MAX_META_BYTES {
        return Err(Error::Format(format!(
            "checkpoint manifest implausibly large ({meta_len} bytes)"
        )));
    }
    let mut meta_bytes = vec![0u8; meta_len as usize];
    read_exact(&mut r, &mut meta_bytes, "manifest")?;
    let meta: Meta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::Format(format!("checkpoint manifest is not valid JSON: {e}")))?;

    let mut params = init_params(&meta.config, meta.input_channels, meta.num_classes, 0)?;
    params.frozen = meta.frozen;
    {
        let mut tensors = params.tensors_mut();
        if tensors.len() != meta.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint lists {} tensors but the architecture has {}",
                meta.tensors.len(),
                tensors.len()
            )));
        }
        for (t, tm) in tensors.iter_mut().zip(meta.tensors.iter()) {
            if t.name != tm.name {
                return Err(Error::Format(format!(
                    "checkpoint tensor '{}' where '{}' was expected",
                    tm.name, t.name
                )));
            }
            if t.shape != tm.shape {
                return Err(Error::Format(format!(
                    "tensor '{}' has shape {:?} in the checkpoint but {:?} in the architecture",
                    tm.name, tm.shape, t.shape
                )));
            }
            let mut buf = vec![0u8; t.data.len() * 8];
            read_exact(&mut r, &mut buf, &tm.name)?;
            for (i, chunk) in buf.chunks_exact(8).enumerate() {
                let v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
                if !v.is_finite() {
                    return Err(Error::Format(format!(
                        "tensor '{}' contains a non-finite value",
                        tm.name
                    )));
                }
                t.data[i] = v;
            }
        }
    }
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => Ok(params),
        Ok(_) => Err(Error::Format("trailing bytes after checkpoint payload".into())),
        Err(e) => Err(Error::Io(e)),
    }
}
