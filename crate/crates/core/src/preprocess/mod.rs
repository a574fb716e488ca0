//! ERP preprocessing path: resample, notch, bandpass, average reference,
//! ICA artifact rejection and stimulus-locked epoching.

pub mod epoch;
pub mod fir;
pub mod ica;
pub mod reference;
pub mod resample;

use serde::{Deserialize, Serialize};

pub use epoch::{epoch_erp, EpochCounts};
pub use fir::{bandpass_filter, notch_filter, FilterKind, FilterSpec, ZeroPhaseFir};
pub use ica::{fastica_reject, IcaConfig, IcaResult};
pub use reference::common_average_reference;
pub use resample::resample;

use crate::epochs::{EpochSet, EPOCH_WINDOW_MS};
use crate::error::Result;
use crate::recording::Recording;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErpConfig {
    pub target_fs: f64,
    pub notch_hz: Vec<f64>,
    pub notch_bandwidth: f64,
    pub band: (f64, f64),
    pub ica: bool,
    pub ica_max_components: usize,
    pub frontal_channels: Vec<String>,
    pub window_ms: (f64, f64),
    pub baseline_ms: (f64, f64),
    pub reject_uv: Option<f64>,
    pub seed: u64,
}

impl Default for ErpConfig {
    fn default() -> Self {
        let ica = IcaConfig::default();
        ErpConfig {
            target_fs: 256.0,
            notch_hz: vec![50.0, 60.0],
            notch_bandwidth: 2.0,
            band: (0.5, 40.0),
            ica: true,
            ica_max_components: ica.max_components,
            frontal_channels: ica.frontal_channels,
            window_ms: EPOCH_WINDOW_MS,
            baseline_ms: (-200.0, 0.0),
            reject_uv: Some(150.0),
            seed: 0,
        }
    }
}

impl ErpConfig {
    /// Control variant with the high edge raised to 100 Hz.
    pub fn wideband() -> Self {
        ErpConfig {
            band: (0.5, 100.0),
            ..ErpConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErpReport {
    pub counts: EpochCounts,
    pub ica_components: usize,
    pub ica_rejected: Vec<usize>,
    pub ica_converged: bool,
}

pub fn preprocess_erp(rec: &Recording, cfg: &ErpConfig) -> Result<(EpochSet, ErpReport)> {
    let mut r = resample(rec, cfg.target_fs)?;
    for &f in &cfg.notch_hz {
        r = notch_filter(&r, f, cfg.notch_bandwidth)?;
    }
    r = bandpass_filter(&r, cfg.band.0, cfg.band.1)?;
    r = common_average_reference(&r)?;
    let mut report = ErpReport {
        counts: EpochCounts::default(),
        ica_components: 0,
        ica_rejected: Vec::new(),
        ica_converged: true,
    };
    if cfg.ica {
        let ica_cfg = IcaConfig {
            max_components: cfg.ica_max_components.min(r.n_channels()),
            frontal_channels: cfg.frontal_channels.clone(),
            seed: cfg.seed,
            ..IcaConfig::default()
        };
        let (cleaned, res) = fastica_reject(&r, &ica_cfg)?;
        report.ica_components = res.n_components();
        report.ica_rejected = res.rejected.clone();
        report.ica_converged = res.converged;
        r = cleaned;
    }
    let (set, counts) = epoch_erp(&r, cfg.window_ms, cfg.baseline_ms, cfg.reject_uv)?;
    report.counts = counts;
    Ok((set, report))
}
