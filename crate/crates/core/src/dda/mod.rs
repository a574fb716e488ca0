//! Delay differential analysis: sliding-window fits of
//! `ẋ = a1·x(t−τ1) + a2·x(t−τ2) + a3·x(t−τ1)²` and stimulus-locked alignment.

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::epochs::{EpochSet, FeatureKind};
use crate::error::{Error, Result};
use crate::recording::{Event, Recording};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DdaParams {
    pub window_len: usize,
    pub shift: usize,
    pub tau1: usize,
    pub tau2: usize,
    /// Frame stride applied when epochs are cut from the series.
    pub stride: usize,
}

impl Default for DdaParams {
    fn default() -> Self {
        DdaParams {
            window_len: 60,
            shift: 2,
            tau1: 6,
            tau2: 16,
            stride: 4,
        }
    }
}

impl DdaParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau1 < self.tau2 && self.tau2 + 2 < self.window_len) {
            return Err(Error::invalid(format!(
                "DDA delays need tau1 < tau2 < window_len - 2 (got {}, {}, {})",
                self.tau1, self.tau2, self.window_len
            )));
        }
        if self.shift == 0 || self.stride == 0 {
            return Err(Error::invalid("DDA shift and stride must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowFit {
    pub coeffs: [f64; 3],
    pub degenerate: bool,
}

impl WindowFit {
    const DEGENERATE: WindowFit = WindowFit {
        coeffs: [0.0; 3],
        degenerate: true,
    };
}

/// Per-window, per-channel coefficients of a whole recording.
#[derive(Debug, Clone, PartialEq)]
pub struct DdaSeries {
    /// window × channel × (a1, a2, a3)
    pub coeffs: Array3<f64>,
    pub centers: Vec<usize>,
    /// window × channel
    pub degenerate: Array2<bool>,
    pub fs: f64,
    pub params: DdaParams,
}

impl DdaSeries {
    pub fn n_windows(&self) -> usize {
        self.centers.len()
    }

    pub fn n_channels(&self) -> usize {
        self.coeffs.dim().1
    }
}

/// Central differences at the interior points `1..n-1`; element `i` is `ẋ(i + 1)`.
pub fn central_difference(x: &[f64], dt: f64) -> Result<Vec<f64>> {
    if x.len() < 3 {
        return Err(Error::invalid(format!(
            "central difference needs at least 3 samples, got {}",
            x.len()
        )));
    }
    if !(dt > 0.0) {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    Ok(x.windows(3).map(|w| (w[2] - w[0]) / (2.0 * dt)).collect())
}

/// Z-scores a segment with the population standard deviation; `None` if it is constant.
pub fn zscore(segment: &[f64]) -> Option<Vec<f64>> {
    let n = segment.len() as f64;
    let mean = segment.iter().sum::<f64>() / n;
    let var = segment.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if !(sd >= 1e-12) {
        return None;
    }
    Some(segment.iter().map(|v| (v - mean) / sd).collect())
}

/// Normal equations `A·a = b` of the regression on an already z-scored segment.
pub fn normal_equations(z: &[f64], params: &DdaParams, dt: f64) -> ([[f64; 3]; 3], [f64; 3]) {
    let (t1, t2) = (params.tau1, params.tau2);
    let mut a = [[0.0; 3]; 3];
    let mut b = [0.0; 3];
    let inv = 1.0 / (2.0 * dt);
    for k in (t2 + 1)..=(z.len() - 2) {
        let f = [z[k - t1], z[k - t2], z[k - t1] * z[k - t1]];
        let y = (z[k + 1] - z[k - 1]) * inv;
        for i in 0..3 {
            b[i] += f[i] * y;
            for j in i..3 {
                a[i][j] += f[i] * f[j];
            }
        }
    }
    a[1][0] = a[0][1];
    a[2][0] = a[0][2];
    a[2][1] = a[1][2];
    (a, b)
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Solves a 3×3 system by Cramér's rule; `None` when the determinant is
/// below `1e-12·(trace/3)³`.
pub fn cramer3(a: &[[f64; 3]; 3], b: &[f64; 3]) -> Option<[f64; 3]> {
    let det = det3(a);
    let scale = ((a[0][0] + a[1][1] + a[2][2]) / 3.0).abs().powi(3);
    if !det.is_finite() || det.abs() < 1e-12 * scale || det == 0.0 {
        return None;
    }
    let mut x = [0.0; 3];
    for (col, xi) in x.iter_mut().enumerate() {
        let mut m = *a;
        for row in 0..3 {
            m[row][col] = b[row];
        }
        *xi = det3(&m) / det;
    }
    Some(x)
}

pub fn solve_window(segment: &[f64], params: &DdaParams, dt: f64) -> Result<WindowFit> {
    if segment.len() != params.window_len {
        return Err(Error::invalid(format!(
            "segment has {} samples, window length is {}",
            segment.len(),
            params.window_len
        )));
    }
    params.validate()?;
    Ok(fit_segment(segment, params, dt))
}

fn fit_segment(segment: &[f64], params: &DdaParams, dt: f64) -> WindowFit {
    let Some(z) = zscore(segment) else {
        return WindowFit::DEGENERATE;
    };
    let (a, b) = normal_equations(&z, params, dt);
    match cramer3(&a, &b) {
        Some(coeffs) => WindowFit {
            coeffs,
            degenerate: false,
        },
        None => WindowFit::DEGENERATE,
    }
}

pub fn window_count(n: usize, params: &DdaParams) -> usize {
    if n < params.window_len {
        0
    } else {
        (n - params.window_len) / params.shift + 1
    }
}

pub fn sliding_dda(rec: &Recording, params: &DdaParams) -> Result<DdaSeries> {
    params.validate()?;
    let n = rec.n_times();
    if n < params.window_len {
        return Err(Error::invalid(format!(
            "recording has {n} samples, shorter than one {}-sample window",
            params.window_len
        )));
    }
    let n_win = window_count(n, params);
    let n_ch = rec.n_channels();
    let dt = 1.0 / rec.fs();
    let samples = rec.samples();
    let per_channel: Vec<Vec<WindowFit>> = (0..n_ch)
        .into_par_iter()
        .map(|c| {
            let col: Vec<f64> = samples.column(c).to_vec();
            (0..n_win)
                .map(|w| {
                    let s = w * params.shift;
                    fit_segment(&col[s..s + params.window_len], params, dt)
                })
                .collect()
        })
        .collect();
    let mut coeffs = Array3::zeros((n_win, n_ch, 3));
    let mut degenerate = Array2::from_elem((n_win, n_ch), false);
    for (c, fits) in per_channel.iter().enumerate() {
        for (w, fit) in fits.iter().enumerate() {
            for j in 0..3 {
                coeffs[[w, c, j]] = fit.coeffs[j];
            }
            degenerate[[w, c]] = fit.degenerate;
        }
    }
    let centers = (0..n_win).map(|w| w * params.shift + params.window_len / 2).collect();
    Ok(DdaSeries {
        coeffs,
        centers,
        degenerate,
        fs: rec.fs(),
        params: *params,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DdaEpochCounts {
    pub kept: usize,
    pub dropped_edge: usize,
}

/// Cuts stimulus-locked epochs out of a coefficient series.
///
/// An epoch spans `[onset + round(lo·fs), onset + round(lo·fs) + round((hi−lo)·fs))`.
/// It holds the `floor((len − W)/shift) + 1` consecutive windows starting with the
/// first window that begins inside the epoch, so every window lies (to within
/// `shift − 1` samples) inside the epoch. Every `stride`-th window is kept and the
/// `(a1, a2, a3)` triples of channel `c` occupy features `3c..3c+3`. Epochs running
/// past either end of the series are dropped and counted.
pub fn epoch_dda(
    series: &DdaSeries,
    events: &[Event],
    window_ms: (f64, f64),
    stride: usize,
) -> Result<(EpochSet, DdaEpochCounts)> {
    let (lo, hi) = window_ms;
    if !(hi > lo) {
        return Err(Error::invalid(format!("epoch window {lo}..{hi} ms is empty")));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    let p = &series.params;
    let fs = series.fs;
    let offset = (lo / 1000.0 * fs).round() as i64;
    let len = ((hi - lo) / 1000.0 * fs).round() as usize;
    if len < p.window_len {
        return Err(Error::invalid("epoch window is shorter than one DDA window"));
    }
    let per_epoch = (len - p.window_len) / p.shift + 1;
    let picks: Vec<usize> = (0..per_epoch).step_by(stride).collect();
    let n_ch = series.n_channels();
    let shift = p.shift as i64;
    let frame_times: Vec<f64> = picks
        .iter()
        .map(|&i| (offset + (i * p.shift + p.window_len / 2) as i64) as f64 / fs * 1000.0)
        .collect();

    let mut counts = DdaEpochCounts::default();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut event_index = Vec::new();
    for (ei, ev) in events.iter().enumerate() {
        let start = ev.onset_sample as i64 + offset;
        // first window index whose start sample is >= the epoch start
        let first = if start <= 0 { start / shift } else { (start + shift - 1) / shift };
        let last = first + per_epoch as i64 - 1;
        if start < 0 || first < 0 || last >= series.n_windows() as i64 {
            counts.dropped_edge += 1;
            continue;
        }
        rows.push(first as usize);
        labels.push(ev.label.clone());
        event_index.push(ei);
        counts.kept += 1;
    }
    let mut data = Array3::zeros((rows.len(), picks.len(), 3 * n_ch));
    for (e, &first) in rows.iter().enumerate() {
        for (t, &i) in picks.iter().enumerate() {
            let w = first + i;
            for c in 0..n_ch {
                for j in 0..3 {
                    data[[e, t, 3 * c + j]] = series.coeffs[[w, c, j]];
                }
            }
        }
    }
    let set = EpochSet::new(data, labels, event_index, FeatureKind::Dda, window_ms, frame_times, n_ch)?;
    Ok((set, counts))
}

/// Full DDA path for one recording.
pub fn preprocess_dda(rec: &Recording, params: &DdaParams, window_ms: (f64, f64)) -> Result<(EpochSet, DdaEpochCounts)> {
    let series = sliding_dda(rec, params)?;
    epoch_dda(&series, rec.events(), window_ms, params.stride)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{LabelRecord, Phoneme, TmsCondition};
    use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
    use ndarray::s;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const DT: f64 = 1.0 / 2048.0;

    fn lu_oracle(a: &[[f64; 3]; 3], b: &[f64; 3]) -> [f64; 3] {
        let m = Matrix3::from_fn(|i, j| a[i][j]);
        let v = Vector3::new(b[0], b[1], b[2]);
        let x = m.lu().solve(&v).unwrap();
        [x[0], x[1], x[2]]
    }

    /// Segment obeying the recursion exactly, with mean zero.
    fn planted(a: [f64; 3], p: &DdaParams, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let w = p.window_len;
        let mut x = vec![0.0; w];
        for v in x.iter_mut().take(p.tau2 + 2).skip(1) {
            *v = rng.random_range(-1.0..1.0);
        }
        for k in (p.tau2 + 1)..(w - 1) {
            let x1 = x[k - p.tau1];
            let x2 = x[k - p.tau2];
            x[k + 1] = x[k - 1] + 2.0 * DT * (a[0] * x1 + a[1] * x2 + a[2] * x1 * x1);
        }
        // x[0] never enters the recursion; use it to zero the mean
        x[0] = -x[1..].iter().sum::<f64>();
        x
    }

    #[test]
    fn central_difference_cases() {
        let ramp: Vec<f64> = (0..10).map(|k| k as f64).collect();
        assert!(central_difference(&ramp, 1.0).unwrap().iter().all(|&d| (d - 1.0).abs() < 1e-15));
        assert!(central_difference(&[3.0; 5], 1.0).unwrap().iter().all(|&d| d == 0.0));
        let x: Vec<f64> = (0..2048).map(|k| (2.0 * std::f64::consts::PI * 5.0 * k as f64 * DT).sin()).collect();
        let d = central_difference(&x, DT).unwrap();
        let w = 2.0 * std::f64::consts::PI * 5.0;
        // leading truncation term of the central difference is w³·dt²/6 ≈ 1.23e-3
        let bound = w.powi(3) * DT * DT / 6.0;
        for (i, v) in d.iter().enumerate() {
            let t = (i + 1) as f64 * DT;
            let truth = w * (w * t).cos();
            assert!((v - truth).abs() <= bound * (1.0 + 1e-6));
            assert!((v - truth).abs() / w < 1e-3);
        }
        assert!(central_difference(&[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn planted_recovery() {
        let p = DdaParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let a = [
                rng.random_range(-40.0..40.0),
                rng.random_range(-40.0..40.0),
                rng.random_range(-40.0..40.0),
            ];
            let x = planted(a, &p, &mut rng);
            let n = x.len() as f64;
            let sd = (x.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
            let truth = [a[0], a[1], a[2] * sd];
            let fit = solve_window(&x, &p, DT).unwrap();
            assert!(!fit.degenerate);
            // dense least-squares oracle on the design matrix
            let z = zscore(&x).unwrap();
            let ks: Vec<usize> = ((p.tau2 + 1)..=(p.window_len - 2)).collect();
            let design = DMatrix::from_fn(ks.len(), 3, |r, c| {
                let k = ks[r];
                match c {
                    0 => z[k - p.tau1],
                    1 => z[k - p.tau2],
                    _ => z[k - p.tau1] * z[k - p.tau1],
                }
            });
            let y = DVector::from_fn(ks.len(), |r, _| (z[ks[r] + 1] - z[ks[r] - 1]) / (2.0 * DT));
            let lsq = design.svd(true, true).solve(&y, 1e-14).unwrap();
            for j in 0..3 {
                assert!((fit.coeffs[j] - truth[j]).abs() < 1e-6, "{:?} vs {:?}", fit.coeffs, truth);
                assert!((lsq[j] - truth[j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_segment_degenerate() {
        let p = DdaParams::default();
        let fit = solve_window(&[2.5; 60], &p, DT).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.coeffs, [0.0; 3]);
        assert!(solve_window(&[0.0; 59], &p, DT).is_err());
    }

    #[test]
    fn amplitude_invariance() {
        let p = DdaParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..60).map(|_| rng.random_range(-1.0..1.0)).collect();
        let base = solve_window(&x, &p, DT).unwrap();
        for c in [0.5, 2.0, 1024.0] {
            let y: Vec<f64> = x.iter().map(|v| v * c).collect();
            assert_eq!(solve_window(&y, &p, DT).unwrap(), base);
        }
        for c in [0.3, 7.1, 1e4] {
            let y: Vec<f64> = x.iter().map(|v| v * c).collect();
            let fit = solve_window(&y, &p, DT).unwrap();
            for j in 0..3 {
                assert!((fit.coeffs[j] - base.coeffs[j]).abs() <= 1e-9 * base.coeffs[j].abs().max(1.0));
            }
        }
    }

    #[test]
    fn window_counts() {
        let p = DdaParams::default();
        assert_eq!(window_count(2048, &p), 995);
        assert_eq!(window_count(60, &p), 1);
        assert_eq!(window_count(59, &p), 0);
        let bad = DdaParams { tau2: 58, ..p };
        assert!(bad.validate().is_err());
    }

    fn noise_rec(n: usize, ch: usize, onsets: &[usize]) -> Recording {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = Array2::from_shape_fn((n, ch), |_| rng.random_range(-1.0..1.0));
        let label = LabelRecord::new("S01", vec![Phoneme::A], TmsCondition::Null, None).unwrap();
        let events = onsets
            .iter()
            .map(|&o| Event {
                onset_sample: o,
                label: label.clone(),
            })
            .collect();
        let names = (0..ch).map(|c| format!("E{c}")).collect();
        Recording::new(data, 2048.0, names, events).unwrap()
    }

    #[test]
    fn sliding_matches_isolated_windows() {
        let rec = noise_rec(400, 3, &[]);
        let p = DdaParams::default();
        let series = sliding_dda(&rec, &p).unwrap();
        assert_eq!(series.n_windows(), 171);
        assert!(series.centers.windows(2).all(|w| w[1] > w[0]));
        for w in [0, 50, 170] {
            for c in 0..3 {
                let seg: Vec<f64> = rec.samples().slice(s![w * 2..w * 2 + 60, c]).to_vec();
                let fit = solve_window(&seg, &p, DT).unwrap();
                for j in 0..3 {
                    assert_eq!(series.coeffs[[w, c, j]].to_bits(), fit.coeffs[j].to_bits());
                }
            }
        }
        let short = noise_rec(50, 1, &[]);
        assert!(sliding_dda(&short, &p).is_err());
    }

    #[test]
    fn epochs_shape_and_stride() {
        let rec = noise_rec(8000, 2, &[100, 3000, 3000, 3001, 7900]);
        let p = DdaParams::default();
        let series = sliding_dda(&rec, &p).unwrap();
        let (e1, c1) = epoch_dda(&series, rec.events(), (-200.0, 800.0), 1).unwrap();
        let (e4, c4) = epoch_dda(&series, rec.events(), (-200.0, 800.0), 4).unwrap();
        assert_eq!(c1, c4);
        assert_eq!(c4.kept, 3);
        assert_eq!(c4.dropped_edge, 2);
        assert_eq!(e1.n_times(), 995);
        assert_eq!(e4.n_times(), 249);
        assert_eq!(e4.n_times(), e1.n_times().div_ceil(4));
        assert_eq!(e4.n_features(), 6);
        assert_eq!(e4.data.slice(s![0, .., ..]), e4.data.slice(s![1, .., ..]));
        for t in 0..e4.n_times() {
            assert_eq!(e4.data.slice(s![0, t, ..]), e1.data.slice(s![0, 4 * t, ..]));
        }
        // first window of the 3000-onset epoch starts at 3000 - 410
        assert_eq!(e1.data[[0, 0, 3]], series.coeffs[[(3000 - 410) / 2, 1, 0]]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]
        #[test]
        fn cramer_matches_lu(seed in any::<u64>()) {
            let p = DdaParams::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..60).map(|_| rng.random_range(-1.0..1.0)).collect();
            let z = zscore(&x).unwrap();
            let (a, b) = normal_equations(&z, &p, DT);
            let fit = cramer3(&a, &b).unwrap();
            let oracle = lu_oracle(&a, &b);
            let norm = oracle.iter().map(|v| v * v).sum::<f64>().sqrt();
            let diff = (0..3).map(|j| (fit[j] - oracle[j]).powi(2)).sum::<f64>().sqrt();
            prop_assert!(diff <= 1e-9 * norm);
        }
    }
}
