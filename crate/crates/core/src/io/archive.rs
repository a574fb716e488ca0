//! Binary archive for [`EpochSet`]s.
//!
//! Layout: the 8-byte magic `EPHEPO01`, a little-endian `u64` header length,
//! a UTF-8 JSON header (layout, labels, provenance), then the epoch data as
//! little-endian f32 in `epoch × time × feature` order.

use std::fs;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::epochs::{EpochSet, FeatureKind};
use crate::error::{Error, Result};
use crate::labels::LabelRecord;

pub const ARCHIVE_MAGIC: &[u8; 8] = b"EPHEPO01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    dtype: String,
    shape: [usize; 3],
    feature_kind: FeatureKind,
    window_ms: (f64, f64),
    frame_times_ms: Vec<f64>,
    n_channels: usize,
    labels: Vec<LabelRecord>,
    event_index: Vec<usize>,
    provenance: serde_json::Value,
}

/// Serializes an epoch set with a free-form provenance record.
pub fn encode_epochs(set: &EpochSet, provenance: &serde_json::Value) -> Vec<u8> {
    let (n, t, f) = set.data.dim();
    let header = Header {
        dtype: "float32-le".into(),
        shape: [n, t, f],
        feature_kind: set.feature_kind,
        window_ms: set.window_ms,
        frame_times_ms: set.frame_times_ms.clone(),
        n_channels: set.n_channels,
        labels: set.labels.clone(),
        event_index: set.event_index.clone(),
        provenance: provenance.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + n * t * f * 4);
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in set.data.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_epochs(bytes: &[u8], path: &Path) -> Result<(EpochSet, serde_json::Value)> {
    let bad = |reason: &str| Error::format(path, reason.to_string());
    if bytes.len() < 16 || &bytes[..8] != ARCHIVE_MAGIC {
        return Err(bad("not an epoch archive (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..).unwrap_or(&[]);
    if hlen > body.len() {
        return Err(bad("header length exceeds file size"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| Error::format(path, e.to_string()))?;
    let [n, t, f] = header.shape;
    let payload = &body[hlen..];
    let expected = n
        .checked_mul(t)
        .and_then(|v| v.checked_mul(f))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| bad("shape overflows"))?;
    if payload.len() != expected {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, shape {:?} needs {expected}", payload.len(), header.shape),
        ));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let data = Array3::from_shape_vec((n, t, f), values).map_err(|e| Error::Shape(e.to_string()))?;
    if let Some(l) = header.labels.iter().find(|l| !l.is_consistent()) {
        return Err(Error::format(path, format!("inconsistent label record for subject {}", l.subject)));
    }
    let set = EpochSet::new(
        data,
        header.labels,
        header.event_index,
        header.feature_kind,
        header.window_ms,
        header.frame_times_ms,
        header.n_channels,
    )
    .map_err(|e| Error::format(path, e.to_string()))?;
    Ok((set, header.provenance))
}

pub fn save_epochs(path: &Path, set: &EpochSet, provenance: &serde_json::Value) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode_epochs(set, provenance)).map_err(|e| Error::io(path, e))
}

pub fn load_epochs(path: &Path) -> Result<(EpochSet, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_epochs(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{Phoneme, TmsCondition};

    fn set() -> EpochSet {
        let labels = vec![
            LabelRecord::new("S01", vec![Phoneme::T], TmsCondition::Null, None).unwrap(),
            LabelRecord::new("S02", vec![Phoneme::E], TmsCondition::TongueTMS, None).unwrap(),
        ];
        let data = Array3::from_shape_fn((2, 4, 6), |(e, t, f)| (e * 100 + t * 10 + f) as f64 * 0.5);
        EpochSet::new(data, labels, vec![3, 9], FeatureKind::Dda, (-200.0, 800.0), vec![-100.0, 0.0, 100.0, 200.0], 2).unwrap()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.epochs");
        let prov = serde_json::json!({"path": "dda", "seed": 3});
        save_epochs(&p, &set(), &prov).unwrap();
        let (back, prov2) = load_epochs(&p).unwrap();
        assert_eq!(back, set());
        assert_eq!(prov2, prov);
        assert_eq!(encode_epochs(&set(), &prov), fs::read(&p).unwrap());
    }

    #[test]
    fn corrupt_archives() {
        let p = Path::new("mem");
        let good = encode_epochs(&set(), &serde_json::Value::Null);
        assert!(decode_epochs(&good[..good.len() - 1], p).is_err());
        assert!(decode_epochs(b"garbage", p).is_err());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode_epochs(&bad, p).is_err());
    }
}
