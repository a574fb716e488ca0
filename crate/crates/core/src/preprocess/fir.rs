//! Hamming-window FIR design and zero-phase (forward-backward) application.
//!
//! Edges follow the usual EEG-tooling convention: the requested frequencies
//! are pass-band edges and each cutoff sits half a transition band outside
//! them. Filter length is `ceil(3.3 / min_transition · fs)`, forced odd.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::recording::Recording;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FilterKind {
    Bandpass,
    Notch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterSpec {
    pub kind: FilterKind,
    /// Pass-band edges for a bandpass, stop-band edges for a notch (Hz).
    pub edges: (f64, f64),
    /// Transition widths at the lower and upper edge (Hz).
    pub transition_bw: (f64, f64),
    pub fs: f64,
}

impl FilterSpec {
    pub fn bandpass(low: f64, high: f64, fs: f64) -> Result<Self> {
        let nyq = fs / 2.0;
        if !(low > 0.0 && low < high && high < nyq) {
            return Err(Error::invalid(format!(
                "bandpass edges must satisfy 0 < low < high < fs/2, got {low}-{high} Hz at fs {fs}"
            )));
        }
        let tl = (0.25f64).max(0.25 * low).min(low);
        let th = (0.25 * high).min(10.0).min(nyq - high);
        if th <= 0.0 {
            return Err(Error::invalid(format!("high edge {high} Hz leaves no transition band below Nyquist")));
        }
        Ok(FilterSpec {
            kind: FilterKind::Bandpass,
            edges: (low, high),
            transition_bw: (tl, th),
            fs,
        })
    }

    /// Band-stop centred on `center` with total stop width `bandwidth`.
    pub fn notch(center: f64, bandwidth: f64, fs: f64) -> Result<Self> {
        let lo = center - bandwidth / 2.0;
        let hi = center + bandwidth / 2.0;
        let tw = bandwidth / 2.0;
        if !(bandwidth > 0.0 && lo - tw / 2.0 > 0.0 && hi + tw / 2.0 < fs / 2.0) {
            return Err(Error::invalid(format!(
                "notch {center}±{} Hz does not fit inside (0, {}) Hz",
                bandwidth / 2.0,
                fs / 2.0
            )));
        }
        Ok(FilterSpec {
            kind: FilterKind::Notch,
            edges: (lo, hi),
            transition_bw: (tw, tw),
            fs,
        })
    }

    pub fn n_taps(&self) -> usize {
        let tw = self.transition_bw.0.min(self.transition_bw.1);
        let n = (3.3 / tw * self.fs).ceil() as usize;
        n | 1
    }

    /// Linear-phase taps (odd length, symmetric).
    pub fn design(&self) -> Vec<f64> {
        let n = self.n_taps();
        match self.kind {
            FilterKind::Bandpass => {
                let f1 = self.edges.0 - self.transition_bw.0 / 2.0;
                let f2 = self.edges.1 + self.transition_bw.1 / 2.0;
                let lp2 = lowpass(n, f2 / self.fs);
                let lp1 = lowpass(n, f1 / self.fs);
                lp2.iter().zip(&lp1).map(|(a, b)| a - b).collect()
            }
            FilterKind::Notch => {
                let lp_hi = lowpass(n, self.edges.1 / self.fs);
                let lp_lo = lowpass(n, self.edges.0 / self.fs);
                let mid = n / 2;
                lp_hi
                    .iter()
                    .zip(&lp_lo)
                    .enumerate()
                    .map(|(i, (a, b))| f64::from(i == mid) - (a - b))
                    .collect()
            }
        }
    }
}

fn hamming(n: usize) -> impl Iterator<Item = f64> {
    let denom = (n - 1) as f64;
    (0..n).map(move |i| 0.54 - 0.46 * (2.0 * PI * i as f64 / denom).cos())
}

/// Windowed-sinc lowpass with unit DC gain; `fc` is cycles/sample.
fn lowpass(n: usize, fc: f64) -> Vec<f64> {
    let mid = (n / 2) as f64;
    let mut taps: Vec<f64> = hamming(n)
        .enumerate()
        .map(|(i, w)| {
            let x = i as f64 - mid;
            let sinc = if x == 0.0 {
                2.0 * fc
            } else {
                (2.0 * PI * fc * x).sin() / (PI * x)
            };
            sinc * w
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Zero-phase FIR: forward-backward application of a symmetric kernel.
///
/// Forward-backward filtering with `h` equals centred convolution with
/// `h ⊛ h`, which is what is precomputed here. Signals are extended at both
/// ends by odd reflection so that constants and linear trends pass the
/// boundary unchanged.
pub struct ZeroPhaseFir {
    taps: Vec<f64>,
    effective: Vec<f64>,
}

impl ZeroPhaseFir {
    pub fn new(taps: Vec<f64>) -> Self {
        let effective = direct_convolve(&taps, &taps);
        ZeroPhaseFir { taps, effective }
    }

    pub fn from_spec(spec: &FilterSpec) -> Self {
        Self::new(spec.design())
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    /// Filters each column of a `time × channels` array.
    pub fn apply_columns(&self, data: &Array2<f64>) -> Array2<f64> {
        let n = data.nrows();
        let pad = self.effective.len() / 2;
        let total = n + 2 * pad + self.effective.len() - 1;
        let size = total.next_power_of_two();
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(size);
        let inv = planner.plan_fft_inverse(size);
        let mut kernel: Vec<Complex<f64>> = self
            .effective
            .iter()
            .map(|&v| Complex::new(v, 0.0))
            .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
            .take(size)
            .collect();
        fwd.process(&mut kernel);

        let mut out = Array2::zeros(data.dim());
        for (c, col) in data.axis_iter(Axis(1)).enumerate() {
            let x: Vec<f64> = col.to_vec();
            let y = self.filter_one(&x, pad, size, &kernel, &fwd, &inv);
            out.column_mut(c).assign(&ndarray::ArrayView1::from(&y));
        }
        out
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let col = Array2::from_shape_vec((x.len(), 1), x.to_vec()).expect("column shape");
        self.apply_columns(&col).column(0).to_vec()
    }

    fn filter_one(
        &self,
        x: &[f64],
        pad: usize,
        size: usize,
        kernel: &[Complex<f64>],
        fwd: &Arc<dyn Fft<f64>>,
        inv: &Arc<dyn Fft<f64>>,
    ) -> Vec<f64> {
        let ext = odd_extend(x, pad);
        let mut buf: Vec<Complex<f64>> = ext
            .iter()
            .map(|&v| Complex::new(v, 0.0))
            .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
            .take(size)
            .collect();
        fwd.process(&mut buf);
        buf.iter_mut().zip(kernel).for_each(|(b, k)| *b *= k);
        inv.process(&mut buf);
        let scale = 1.0 / size as f64;
        let centre = self.effective.len() / 2;
        (0..x.len())
            .map(|i| buf[i + pad + centre].re * scale)
            .collect()
    }
}

/// Odd reflection about each endpoint, continued with a constant once the
/// signal is exhausted.
fn odd_extend(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    let head = |k: usize| {
        let k = k.min(n - 1);
        2.0 * x[0] - x[k]
    };
    let tail = |k: usize| {
        let k = k.min(n - 1);
        2.0 * x[n - 1] - x[n - 1 - k]
    };
    for k in (1..=pad).rev() {
        out.push(head(k));
    }
    out.extend_from_slice(x);
    for k in 1..=pad {
        out.push(tail(k));
    }
    out
}

fn direct_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &ai) in a.iter().enumerate() {
        for (j, &bj) in b.iter().enumerate() {
            out[i + j] += ai * bj;
        }
    }
    out
}

pub fn bandpass_filter(rec: &Recording, low: f64, high: f64) -> Result<Recording> {
    let spec = FilterSpec::bandpass(low, high, rec.fs())?;
    rec.with_samples(ZeroPhaseFir::from_spec(&spec).apply_columns(rec.samples()))
}

pub fn notch_filter(rec: &Recording, center: f64, bandwidth: f64) -> Result<Recording> {
    let spec = FilterSpec::notch(center, bandwidth, rec.fs())?;
    rec.with_samples(ZeroPhaseFir::from_spec(&spec).apply_columns(rec.samples()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tone(freq: f64, fs: f64, secs: f64) -> Vec<f64> {
        let n = (fs * secs) as usize;
        (0..n).map(|i| (2.0 * PI * freq * i as f64 / fs).sin()).collect()
    }

    /// RMS gain in dB over the middle third.
    fn gain_db(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len();
        let r = n / 3..2 * n / 3;
        let rms = |v: &[f64]| (v.iter().map(|a| a * a).sum::<f64>() / v.len() as f64).sqrt();
        20.0 * (rms(&y[r.clone()]) / rms(&x[r])).log10()
    }

    #[test]
    fn bandpass_design_lengths() {
        let bp = FilterSpec::bandpass(0.5, 40.0, 256.0).unwrap();
        assert_eq!(bp.transition_bw, (0.25, 10.0));
        assert_eq!(bp.n_taps(), 3381);
        let taps = bp.design();
        assert!(taps.iter().sum::<f64>().abs() < 1e-12);
        for i in 0..taps.len() / 2 {
            assert!((taps[i] - taps[taps.len() - 1 - i]).abs() < 1e-15);
        }
    }

    #[test]
    fn bandpass_gains() {
        let fs = 256.0;
        let f = ZeroPhaseFir::from_spec(&FilterSpec::bandpass(0.5, 40.0, fs).unwrap());
        let x = tone(10.0, fs, 30.0);
        assert!(gain_db(&x, &f.apply(&x)).abs() < 0.5);
        let x = tone(100.0, fs, 30.0);
        assert!(gain_db(&x, &f.apply(&x)) < -30.0);
        let wide = ZeroPhaseFir::from_spec(&FilterSpec::bandpass(0.5, 100.0, fs).unwrap());
        let x = tone(60.0, fs, 30.0);
        assert!(gain_db(&x, &wide.apply(&x)).abs() < 0.5);
    }

    #[test]
    fn notch_gains() {
        let fs = 256.0;
        let f = ZeroPhaseFir::from_spec(&FilterSpec::notch(50.0, 2.0, fs).unwrap());
        let x = tone(50.0, fs, 10.0);
        assert!(gain_db(&x, &f.apply(&x)) < -20.0);
        let x = tone(10.0, fs, 10.0);
        assert!(gain_db(&x, &f.apply(&x)).abs() < 0.5);
        let dc = vec![3.7; 2560];
        let y = f.apply(&dc);
        for v in y {
            assert!((v - 3.7).abs() < 1e-6 * 3.7);
        }
    }

    #[test]
    fn invalid_edges() {
        assert!(FilterSpec::bandpass(0.0, 40.0, 256.0).is_err());
        assert!(FilterSpec::bandpass(40.0, 10.0, 256.0).is_err());
        assert!(FilterSpec::bandpass(0.5, 128.0, 256.0).is_err());
        assert!(FilterSpec::notch(127.5, 2.0, 256.0).is_err());
        assert!(FilterSpec::notch(50.0, 0.0, 256.0).is_err());
        assert!(FilterSpec::notch(0.5, 2.0, 256.0).is_err());
    }

    #[test]
    fn impulse_has_zero_group_delay() {
        let f = ZeroPhaseFir::from_spec(&FilterSpec::bandpass(1.0, 40.0, 256.0).unwrap());
        let n = 4096;
        let mut x = vec![0.0; n];
        let at = n / 2;
        x[at] = 1.0;
        let y = f.apply(&x);
        let peak = y
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .unwrap()
            .0;
        assert!((peak as i64 - at as i64).abs() <= 1);
        for k in 1..200 {
            assert!((y[at - k] - y[at + k]).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn filters_are_linear(
            xs in proptest::collection::vec(-50.0f64..50.0, 600),
            ys in proptest::collection::vec(-50.0f64..50.0, 600),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            for f in [
                ZeroPhaseFir::from_spec(&FilterSpec::notch(50.0, 2.0, 256.0).unwrap()),
                ZeroPhaseFir::from_spec(&FilterSpec::bandpass(0.5, 40.0, 256.0).unwrap()),
            ] {
                let mix: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| a * x + b * y).collect();
                let lhs = f.apply(&mix);
                let fx = f.apply(&xs);
                let fy = f.apply(&ys);
                let scale = lhs.iter().map(|v| v.abs()).fold(1.0, f64::max);
                for i in 0..lhs.len() {
                    prop_assert!((lhs[i] - (a * fx[i] + b * fy[i])).abs() <= 1e-6 * scale);
                }
            }
        }
    }
}
