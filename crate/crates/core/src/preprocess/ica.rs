//! FastICA (deflation, tanh contrast) with automatic EOG and muscle
//! component rejection.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::recording::Recording;

#[derive(Debug, Clone, PartialEq)]
pub struct IcaConfig {
    pub max_components: usize,
    pub frontal_channels: Vec<String>,
    /// |Pearson r| against any frontal channel at or above which a component is ocular.
    pub eog_threshold: f64,
    /// Fraction of spectral power above `muscle_cutoff_hz` beyond which a component is muscular.
    pub muscle_threshold: f64,
    pub muscle_cutoff_hz: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for IcaConfig {
    fn default() -> Self {
        IcaConfig {
            max_components: 15,
            frontal_channels: ["Fp1", "Fp2", "AF7", "AF8"].map(String::from).to_vec(),
            eog_threshold: 0.8,
            muscle_threshold: 0.6,
            muscle_cutoff_hz: 30.0,
            max_iter: 200,
            tol: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IcaResult {
    /// components × channels
    pub unmixing: DMatrix<f64>,
    /// channels × components
    pub mixing: DMatrix<f64>,
    pub rejected: Vec<usize>,
    pub converged: bool,
    pub eog_scores: Vec<f64>,
    pub muscle_fractions: Vec<f64>,
}

impl IcaResult {
    pub fn n_components(&self) -> usize {
        self.unmixing.nrows()
    }
}

/// Unmixing/mixing estimated by FastICA on centred `channels × time` data.
pub struct FastIcaFit {
    pub unmixing: DMatrix<f64>,
    pub mixing: DMatrix<f64>,
    pub converged: bool,
}

pub fn fastica(
    centred: &DMatrix<f64>,
    n_components: usize,
    max_iter: usize,
    tol: f64,
    seed: u64,
) -> Result<FastIcaFit> {
    let (n_ch, n_t) = centred.shape();
    if n_components == 0 || n_components > n_ch {
        return Err(Error::invalid(format!(
            "cannot extract {n_components} components from {n_ch} channels"
        )));
    }
    let cov = centred * centred.transpose() / n_t as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..n_ch).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    // rank-deficient data (e.g. after average referencing) loses trailing components
    let order: Vec<usize> = order
        .into_iter()
        .filter(|&i| eig.eigenvalues[i] > 1e-10 * top)
        .take(n_components)
        .collect();
    let n = order.len();
    if n == 0 {
        return Err(Error::Numerical("data covariance is zero".into()));
    }
    // whitening K = D^-1/2 E^T and its pseudo-inverse E D^1/2
    let mut whiten = DMatrix::zeros(n, n_ch);
    let mut dewhiten = DMatrix::zeros(n_ch, n);
    for (r, &i) in order.iter().enumerate() {
        let d = eig.eigenvalues[i];
        let v = eig.eigenvectors.column(i);
        for c in 0..n_ch {
            whiten[(r, c)] = v[c] / d.sqrt();
            dewhiten[(c, r)] = v[c] * d.sqrt();
        }
    }
    let z = &whiten * centred;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w_rows: Vec<DVector<f64>> = Vec::with_capacity(n);
    let mut converged = true;
    for _ in 0..n {
        let mut w = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        decorrelate(&mut w, &w_rows);
        w.normalize_mut();
        let mut done = false;
        for _ in 0..max_iter {
            let wx = z.transpose() * &w;
            let g = wx.map(f64::tanh);
            let g_prime_mean = g.iter().map(|v| 1.0 - v * v).sum::<f64>() / n_t as f64;
            let mut w_new = &z * &g / n_t as f64 - &w * g_prime_mean;
            decorrelate(&mut w_new, &w_rows);
            let norm = w_new.norm();
            if norm < 1e-300 {
                break;
            }
            w_new /= norm;
            let lim = (w_new.dot(&w).abs() - 1.0).abs();
            w = w_new;
            if lim < tol {
                done = true;
                break;
            }
        }
        converged &= done;
        w_rows.push(w);
    }
    let w = DMatrix::from_fn(n, n, |r, c| w_rows[r][c]);
    Ok(FastIcaFit {
        unmixing: &w * &whiten,
        mixing: &dewhiten * w.transpose(),
        converged,
    })
}

fn decorrelate(w: &mut DVector<f64>, previous: &[DVector<f64>]) {
    for prev in previous {
        let proj = w.dot(prev);
        w.axpy(-proj, prev, 1.0);
    }
}

/// Keeps at most `floor(n_components / 3)` candidates, strongest score first
/// (ties by lower index). Returned indices are sorted ascending.
pub fn cap_rejections(candidates: &[(usize, f64)], n_components: usize) -> Vec<usize> {
    let cap = n_components / 3;
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut keep: Vec<usize> = sorted.into_iter().take(cap).map(|(i, _)| i).collect();
    keep.sort_unstable();
    keep
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Fraction of (non-DC) periodogram power above `cutoff_hz`.
pub fn high_frequency_fraction(x: &[f64], fs: f64, cutoff_hz: f64) -> f64 {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v - mean, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let (mut total, mut high) = (0.0, 0.0);
    for (k, c) in buf.iter().enumerate().take(n / 2 + 1).skip(1) {
        let p = c.norm_sqr();
        total += p;
        if k as f64 * fs / n as f64 > cutoff_hz {
            high += p;
        }
    }
    if total > 0.0 {
        high / total
    } else {
        0.0
    }
}

pub fn fastica_reject(rec: &Recording, cfg: &IcaConfig) -> Result<(Recording, IcaResult)> {
    if cfg.max_components > rec.n_channels() {
        return Err(Error::invalid(format!(
            "max_components {} exceeds channel count {}",
            cfg.max_components,
            rec.n_channels()
        )));
    }
    let samples = rec.samples();
    let (n_t, n_ch) = samples.dim();
    let mut x = DMatrix::from_fn(n_ch, n_t, |c, t| samples[[t, c]]);
    for mut row in x.row_iter_mut() {
        let m = row.sum() / n_t as f64;
        row.add_scalar_mut(-m);
    }
    let fit = fastica(&x, cfg.max_components, cfg.max_iter, cfg.tol, cfg.seed)?;
    let sources = &fit.unmixing * &x;
    let n_comp = sources.nrows();

    let frontal: Vec<Vec<f64>> = cfg
        .frontal_channels
        .iter()
        .filter_map(|name| rec.channel_index(name))
        .map(|c| x.row(c).iter().copied().collect())
        .collect();
    let mut eog_scores = Vec::with_capacity(n_comp);
    let mut muscle_fractions = Vec::with_capacity(n_comp);
    let mut candidates = Vec::new();
    for k in 0..n_comp {
        let s: Vec<f64> = sources.row(k).iter().copied().collect();
        let eog = frontal
            .iter()
            .map(|f| pearson(&s, f).abs())
            .fold(0.0, f64::max);
        let muscle = high_frequency_fraction(&s, rec.fs(), cfg.muscle_cutoff_hz);
        eog_scores.push(eog);
        muscle_fractions.push(muscle);
        let eog_hit = eog >= cfg.eog_threshold;
        let muscle_hit = muscle > cfg.muscle_threshold;
        if eog_hit || muscle_hit {
            let score = if eog_hit { eog } else { 0.0 }.max(if muscle_hit { muscle } else { 0.0 });
            candidates.push((k, score));
        }
    }

    if !fit.converged {
        log::warn!("FastICA did not converge within {} iterations; no components rejected", cfg.max_iter);
        let result = IcaResult {
            unmixing: fit.unmixing,
            mixing: fit.mixing,
            rejected: Vec::new(),
            converged: false,
            eog_scores,
            muscle_fractions,
        };
        return Ok((rec.clone(), result));
    }

    let rejected = cap_rejections(&candidates, n_comp);
    let mut cleaned = samples.clone();
    for &k in &rejected {
        for c in 0..n_ch {
            let a = fit.mixing[(c, k)];
            for t in 0..n_t {
                cleaned[[t, c]] -= a * sources[(k, t)];
            }
        }
    }
    let result = IcaResult {
        unmixing: fit.unmixing,
        mixing: fit.mixing,
        rejected,
        converged: true,
        eog_scores,
        muscle_fractions,
    };
    Ok((rec.with_samples(cleaned)?, result))
}
