//! Fourier-domain resampling.
//!
//! The spectrum is truncated to the new Nyquist before the inverse transform,
//! which is an ideal anti-aliasing lowpass applied ahead of decimation.

use ndarray::{Array2, Axis};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::recording::{Event, Recording};

pub fn resample(rec: &Recording, target_fs: f64) -> Result<Recording> {
    if !(target_fs > 0.0) {
        return Err(Error::invalid(format!("target rate must be positive, got {target_fs}")));
    }
    if target_fs > rec.fs() {
        return Err(Error::invalid(format!(
            "upsampling from {} Hz to {target_fs} Hz is not supported",
            rec.fs()
        )));
    }
    if target_fs == rec.fs() {
        return Ok(rec.clone());
    }
    let ratio = target_fs / rec.fs();
    let n_in = rec.n_times();
    let n_out = ((n_in as f64) * ratio).round() as usize;
    if n_out < 2 {
        return Err(Error::invalid("resampled recording would have fewer than 2 samples"));
    }
    let samples = resample_columns(rec.samples(), n_out);
    let events = rec
        .events()
        .iter()
        .map(|e| Event {
            onset_sample: (((e.onset_sample as f64) * ratio).round() as usize).min(n_out - 1),
            label: e.label.clone(),
        })
        .collect();
    rec.rebuild(samples, target_fs, events)
}

/// Resamples every column of a `time × channels` array to `n_out <= time` samples.
pub fn resample_columns(data: &Array2<f64>, n_out: usize) -> Array2<f64> {
    let n_in = data.nrows();
    assert!(n_out <= n_in, "resample_columns only decimates");
    if n_out == n_in {
        return data.clone();
    }
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n_in);
    let inv = planner.plan_fft_inverse(n_out);
    let half = n_out / 2;
    let mut out = Array2::zeros((n_out, data.ncols()));
    for (c, col) in data.axis_iter(Axis(1)).enumerate() {
        let mut spec: Vec<Complex<f64>> = col.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fwd.process(&mut spec);
        let mut dst = vec![Complex::new(0.0, 0.0); n_out];
        dst[0] = spec[0];
        for k in 1..=(n_out - 1) / 2 {
            dst[k] = spec[k];
            dst[n_out - k] = spec[n_in - k];
        }
        if n_out % 2 == 0 {
            // both halves of the new Nyquist bin fold into one real coefficient
            dst[half] = spec[half] + spec[n_in - half];
        }
        inv.process(&mut dst);
        let scale = 1.0 / n_in as f64;
        for (t, v) in dst.iter().enumerate() {
            out[[t, c]] = v.re * scale;
        }
    }
    out
}
