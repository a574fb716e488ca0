//! Stimulus-locked ERP epoching with baseline correction and amplitude rejection.

use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use crate::epochs::{EpochSet, FeatureKind};
use crate::error::{Error, Result};
use crate::recording::Recording;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochCounts {
    pub kept: usize,
    /// Events whose window extends past either edge of the recording.
    pub skipped_edge: usize,
    pub rejected_amplitude: usize,
}

impl EpochCounts {
    pub fn total(&self) -> usize {
        self.kept + self.skipped_edge + self.rejected_amplitude
    }
}

/// Onset-relative time (ms) of each frame of an epoch starting `pre` samples before onset.
pub fn frame_times(n: usize, pre: i64, fs: f64) -> Vec<f64> {
    (0..n).map(|i| (i as i64 - pre) as f64 / fs * 1000.0).collect()
}

/// Cuts `[onset + round(lo·fs), onset + round(lo·fs) + round((hi−lo)·fs))` around every
/// event, subtracts the per-channel mean over `baseline_ms`, and drops epochs where any
/// baseline-corrected |value| exceeds `reject_uv`.
pub fn epoch_erp(
    rec: &Recording,
    window_ms: (f64, f64),
    baseline_ms: (f64, f64),
    reject_uv: Option<f64>,
) -> Result<(EpochSet, EpochCounts)> {
    let (lo, hi) = window_ms;
    if !(hi > lo) {
        return Err(Error::invalid(format!("epoch window {lo}..{hi} ms is empty")));
    }
    if !(baseline_ms.1 > baseline_ms.0) || baseline_ms.0 < lo || baseline_ms.1 > hi {
        return Err(Error::invalid(format!(
            "baseline {:?} ms must be a non-empty interval inside the epoch window",
            baseline_ms
        )));
    }
    if let Some(t) = reject_uv {
        if !(t > 0.0) {
            return Err(Error::invalid(format!("rejection threshold must be positive, got {t}")));
        }
    }
    let fs = rec.fs();
    let offset = (lo / 1000.0 * fs).round() as i64;
    let len = ((hi - lo) / 1000.0 * fs).round() as usize;
    let times = frame_times(len, -offset, fs);
    let b0 = times.iter().position(|&t| t >= baseline_ms.0 - 1e-9).unwrap_or(len);
    let b1 = times.iter().position(|&t| t >= baseline_ms.1 - 1e-9).unwrap_or(len);
    if b1 <= b0 {
        return Err(Error::invalid("baseline window contains no samples"));
    }

    let n_ch = rec.n_channels();
    let n_t = rec.n_times() as i64;
    let mut counts = EpochCounts::default();
    let mut chunks = Vec::new();
    let mut labels = Vec::new();
    let mut event_index = Vec::new();
    for (ei, ev) in rec.events().iter().enumerate() {
        let start = ev.onset_sample as i64 + offset;
        if start < 0 || start + len as i64 > n_t {
            counts.skipped_edge += 1;
            continue;
        }
        let start = start as usize;
        let mut ep = rec.samples().slice(s![start..start + len, ..]).to_owned();
        for c in 0..n_ch {
            let base = ep.slice(s![b0..b1, c]).sum() / (b1 - b0) as f64;
            ep.column_mut(c).mapv_inplace(|v| v - base);
        }
        if let Some(t) = reject_uv {
            if ep.iter().any(|v| v.abs() > t) {
                counts.rejected_amplitude += 1;
                continue;
            }
        }
        counts.kept += 1;
        chunks.push(ep);
        labels.push(ev.label.clone());
        event_index.push(ei);
    }
    let mut data = Array3::zeros((chunks.len(), len, n_ch));
    for (i, ep) in chunks.iter().enumerate() {
        data.slice_mut(s![i, .., ..]).assign(ep);
    }
    let set = EpochSet::new(data, labels, event_index, FeatureKind::Erp, window_ms, times, n_ch)?;
    Ok((set, counts))
}
