//! Versioned binary checkpoints.
//!
//! Layout: `b"MBCK"` magic, `u32` format version, `u64` header length, a JSON
//! header (producing model config, shared Adam step, per-parameter metadata),
//! then each parameter's raw little-endian `f32` data in header order,
//! followed by its Adam moments when present. Reload is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::optim::ParamSet;

const MAGIC: &[u8; 4] = b"MBCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: serde_json::Value,
    step: u64,
    extra: BTreeMap<String, String>,
    params: Vec<ParamMeta>,
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    regularized: bool,
    has_adam: bool,
}

pub fn save(
    path: &Path,
    params: &ParamSet<f32>,
    config: &serde_json::Value,
    extra: &BTreeMap<String, String>,
) -> Result<(), CheckpointError> {
    let header = Header {
        config: config.clone(),
        step: params.step,
        extra: extra.clone(),
        params: params
            .iter()
            .map(|p| ParamMeta {
                name: p.name.clone(),
                shape: p.shape.clone(),
                trainable: p.trainable,
                regularized: p.regularized,
                has_adam: p.adam_m.is_some(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut file = fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    let mut buf = Vec::new();
    for p in params.iter() {
        buf.clear();
        buf.reserve(p.data.len() * 4);
        for &v in &p.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&buf)?;
        if let (Some(m), Some(v)) = (&p.adam_m, &p.adam_v) {
            buf.clear();
            for &x in m.iter().chain(v.iter()) {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            file.write_all(&buf)?;
        }
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamSet<f32>, serde_json::Value, BTreeMap<String, String>), CheckpointError> {
    let mut file = fs::File::open(path)?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(CheckpointError::Format(format!("unsupported version {version}")));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;

    let mut params = ParamSet::new();
    params.step = header.step;
    for meta in &header.params {
        let numel: usize = meta.shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        file.read_exact(&mut raw)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.insert(&meta.name, meta.shape.clone(), data, meta.trainable, meta.regularized);
        if meta.has_adam {
            let mut raw = vec![0u8; numel * 8];
            file.read_exact(&mut raw)?;
            let moments: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let p = params.get_mut(&meta.name);
            p.adam_m = Some(moments[..numel].to_vec());
            p.adam_v = Some(moments[numel..].to_vec());
        }
    }
    Ok((params, header.config, header.extra))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");

        let mut params = ParamSet::<f32>::new();
        params.insert("a.w", vec![2, 3], vec![0.1, -0.2, 0.3, f32::MIN_POSITIVE, 1e30, -0.0], true, true);
        params.insert("a.stats", vec![2], vec![5.0, 6.0], false, false);
        params.step = 42;
        params.get_mut("a.w").adam_m = Some(vec![1.0; 6]);
        params.get_mut("a.w").adam_v = Some(vec![2.0; 6]);

        let config = serde_json::json!({"variant": "test", "units": 4});
        let mut extra = BTreeMap::new();
        extra.insert("epoch".to_string(), "3".to_string());

        save(&path, &params, &config, &extra).unwrap();
        let (loaded, cfg, ex) = load(&path).unwrap();

        assert_eq!(cfg, config);
        assert_eq!(ex.get("epoch").map(String::as_str), Some("3"));
        assert_eq!(loaded.step, 42);
        let w = loaded.get("a.w");
        assert_eq!(w.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   params.get("a.w").data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(w.adam_m.as_deref(), Some(&[1.0f32; 6][..]));
        assert!(w.trainable && w.regularized);
        let stats = loaded.get("a.stats");
        assert!(!stats.trainable);
        assert!(stats.adam_m.is_none());
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOPE0000").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::Format(_))));
    }
}
