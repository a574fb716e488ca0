//! Single-file checkpoints.
//!
//! Layout: the 8 magic bytes `EPHCKPT1`, a little-endian u64 header length,
//! a UTF-8 JSON header, then every tensor as little-endian f32 values in
//! header order. The header carries the model configuration, the input width,
//! a free-form configuration echo and `(name, shape, offset)` for each tensor,
//! where `offset` counts f32 values from the start of the payload. Batch-norm
//! running statistics are stored as `bn{i}.running_mean` / `bn{i}.running_var`.

use std::path::Path;

use eegphon_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::model::{Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"EPHCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: ModelConfig,
    pub n_features: usize,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn tensors(model: &Model) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out: Vec<_> = model
        .params
        .iter()
        .map(|p| (p.name.clone(), p.value.shape.clone(), p.value.data.clone()))
        .collect();
    for (i, s) in model.bn.iter().enumerate() {
        out.push((format!("bn{i}.running_mean"), vec![s.mean.len()], s.mean.clone()));
        out.push((format!("bn{i}.running_var"), vec![s.var.len()], s.var.clone()));
    }
    out
}

pub fn encode(model: &Model, config: &serde_json::Value) -> Vec<u8> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    let mut offset = 0;
    for (name, shape, data) in tensors(model) {
        entries.push(TensorEntry {
            name,
            shape,
            offset,
        });
        offset += data.len();
        for v in data {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let header = Header {
        model: model.cfg.clone(),
        n_features: model.n_features,
        config: config.clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(Model, Header)> {
    let bad = |reason: String| Error::format(path, reason);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16usize.saturating_add(hlen)).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
    let payload = &bytes[16 + hlen..];
    if payload.len() % 4 != 0 {
        return Err(bad("payload is not a whole number of f32 values".into()));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let mut model = Model::new(header.model.clone(), header.n_features, 0).map_err(|e| bad(e.to_string()))?;
    let expected = tensors(&model);
    if expected.len() != header.tensors.len() {
        return Err(bad(format!("{} tensors stored, model has {}", header.tensors.len(), expected.len())));
    }
    let mut end = 0;
    for ((name, shape, _), entry) in expected.iter().zip(&header.tensors) {
        if *name != entry.name || *shape != entry.shape {
            return Err(bad(format!("tensor {} {:?} does not match model tensor {name} {shape:?}", entry.name, entry.shape)));
        }
        end = end.max(entry.offset + shape.iter().product::<usize>());
    }
    if end != values.len() {
        return Err(bad(format!("payload holds {} values, header describes {end}", values.len())));
    }
    let slice = |e: &TensorEntry| values[e.offset..e.offset + e.shape.iter().product::<usize>()].to_vec();
    let n_params = model.params.len();
    for (p, e) in model.params.iter_mut().zip(&header.tensors[..n_params]) {
        p.value.data = slice(e);
    }
    for (i, s) in model.bn.iter_mut().enumerate() {
        s.mean = slice(&header.tensors[n_params + 2 * i]);
        s.var = slice(&header.tensors[n_params + 2 * i + 1]);
    }
    Ok((model, header))
}

pub fn save(path: &Path, model: &Model, config: &serde_json::Value) -> Result<()> {
    std::fs::write(path, encode(model, config)).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn load(path: &Path) -> Result<(Model, Header)> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use eegphon_core::Task;

    #[test]
    fn round_trip_is_f32_exact() {
        let mut cfg = ModelConfig::tiny(vec![Task::Phoneme, Task::Voicing]);
        cfg.ctc_enabled = true;
        let mut m = Model::new(cfg, 5, 7).unwrap();
        m.bn[0].mean[1] = 0.25;
        m.bn[1].var[0] = 3.5;
        let echo = serde_json::json!({"seed": 7});
        let bytes = encode(&m, &echo);
        let (back, header) = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(header.config, echo);
        assert_eq!(back.bn, m.bn);
        for (a, b) in back.params.iter().zip(m.params.iter()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.value.data.iter().zip(&b.value.data) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        assert_eq!(encode(&back, &echo), bytes);
    }

    #[test]
    fn corruption_rejected() {
        let m = Model::new(ModelConfig::tiny(vec![Task::Phoneme]), 3, 0).unwrap();
        let bytes = encode(&m, &serde_json::Value::Null);
        let p = Path::new("x");
        assert!(decode(&bytes[..bytes.len() - 4], p).is_err());
        assert!(decode(&bytes[..20], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad, p).is_err());
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 4]);
        assert!(decode(&extra, p).is_err());
    }
}
