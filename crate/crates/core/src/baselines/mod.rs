//! Classical comparators on pooled (temporal mean + std) features:
//! multinomial logistic regression, shrinkage LDA, and the metadata-only
//! acoustic baseline.

use nalgebra::{Cholesky, DMatrix, DVector};
use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::epochs::{EpochSet, ItemSet};
use crate::error::{Error, Result};
use crate::labels::{LabelRecord, Phoneme, Task};
use crate::stats::metrics::argmax;

/// `trials × 2F` matrix: per-feature temporal means, then per-feature temporal
/// (population) standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeatures {
    pub matrix: Array2<f64>,
}

pub fn pool_array(data: &Array3<f64>) -> PooledFeatures {
    let (n, t, f) = data.dim();
    let mut out = Array2::zeros((n, 2 * f));
    for (i, sample) in data.outer_iter().enumerate() {
        for c in 0..f {
            let col = sample.column(c);
            let m = col.sum() / t as f64;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / t as f64;
            out[[i, c]] = m;
            out[[i, f + c]] = var.sqrt();
        }
    }
    PooledFeatures { matrix: out }
}

pub fn pool_features(epochs: &EpochSet) -> Result<PooledFeatures> {
    if epochs.is_empty() {
        return Err(Error::invalid("cannot pool an empty epoch set"));
    }
    Ok(pool_array(&epochs.data))
}

/// Per-column standardization fitted on training rows only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Constant columns get unit scale, so they map to 0.
    pub fn fit(x: &Array2<f64>) -> Result<Standardizer> {
        if x.nrows() == 0 {
            return Err(Error::invalid("cannot fit a standardizer on zero rows"));
        }
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let std: Vec<f64> = x
            .axis_iter(Axis(1))
            .zip(mean.iter())
            .map(|(col, m)| {
                let sd = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / col.len() as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean: mean.to_vec(), std })
    }

    pub fn transform(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|v| (v - self.mean[j]) / self.std[j]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrConfig {
    /// L2 strength λ in `mean CE + λ/(2n)·‖W‖²`; the bias is not penalized.
    pub l2: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub memory: usize,
}

impl Default for LrConfig {
    fn default() -> Self {
        LrConfig {
            l2: 1.0,
            tol: 1e-6,
            max_iter: 1000,
            memory: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    /// features × fitted classes
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    /// Original class index of every fitted column.
    pub classes: Vec<usize>,
    pub n_classes: usize,
    pub converged: bool,
    pub iterations: usize,
}

impl LogisticModel {
    /// Logits over all `n_classes`; classes absent from training get `f64::MIN`.
    pub fn logits(&self, x: &Array2<f64>) -> Array2<f64> {
        let z = x.dot(&self.weights) + &self.bias;
        let mut out = Array2::from_elem((x.nrows(), self.n_classes), f64::MIN);
        for (j, &c) in self.classes.iter().enumerate() {
            out.column_mut(c).assign(&z.column(j));
        }
        out
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<usize> {
        let l = self.logits(x);
        l.outer_iter().map(argmax).collect()
    }
}

fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.outer_iter_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

struct LrProblem<'a> {
    x: &'a Array2<f64>,
    y: Vec<usize>,
    k: usize,
    l2: f64,
}

impl LrProblem<'_> {
    fn unpack(&self, theta: &[f64]) -> (Array2<f64>, Array1<f64>) {
        let d = self.x.ncols();
        let w = Array2::from_shape_vec((d, self.k), theta[..d * self.k].to_vec()).expect("shape");
        let b = Array1::from(theta[d * self.k..].to_vec());
        (w, b)
    }

    fn eval(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let n = self.x.nrows() as f64;
        let (w, b) = self.unpack(theta);
        let mut z = self.x.dot(&w) + &b;
        let mut loss = 0.0;
        for (i, row) in z.outer_iter().enumerate() {
            let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[self.y[i]];
        }
        loss /= n;
        loss += 0.5 * self.l2 / n * w.iter().map(|v| v * v).sum::<f64>();
        softmax_rows(&mut z);
        for (i, &yi) in self.y.iter().enumerate() {
            z[[i, yi]] -= 1.0;
        }
        z /= n;
        let gw = self.x.t().dot(&z) + &(&w * (self.l2 / n));
        let gb = z.sum_axis(Axis(0));
        let mut g = gw.into_raw_vec_and_offset().0;
        g.extend(gb.iter());
        (loss, g)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `f` by L-BFGS with Armijo backtracking. Returns
/// `(theta, converged, iterations)`.
fn lbfgs<F: Fn(&[f64]) -> (f64, Vec<f64>)>(f: F, mut theta: Vec<f64>, tol: f64, max_iter: usize, memory: usize) -> (Vec<f64>, bool, usize) {
    let (mut fx, mut g) = f(&theta);
    let mut hist: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> = Default::default();
    for it in 0..max_iter {
        if dot(&g, &g).sqrt() < tol {
            return (theta, true, it);
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            hist.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t + step * d).collect();
            let (fc, gc) = f(&cand);
            if fc.is_finite() && fc <= fx + 1e-4 * step * slope {
                accepted = Some((cand, fc, gc));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, fc, gc)) = accepted else {
            // no decrease possible at machine precision
            let converged = dot(&g, &g).sqrt() < tol;
            return (theta, converged, it);
        };
        let s: Vec<f64> = cand.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gc.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            if hist.len() == memory {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        theta = cand;
        fx = fc;
        g = gc;
    }
    let converged = dot(&g, &g).sqrt() < tol;
    (theta, converged, max_iter)
}

/// Fits an L2-penalized multinomial logistic regression.
pub fn fit_logistic(x: &Array2<f64>, y: &[usize], n_classes: usize, cfg: &LrConfig) -> Result<LogisticModel> {
    if x.nrows() != y.len() {
        return Err(Error::Shape(format!("{} rows for {} labels", x.nrows(), y.len())));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
        return Err(Error::invalid(format!("label {bad} outside [0, {n_classes})")));
    }
    if !(cfg.l2 >= 0.0) {
        return Err(Error::invalid("l2 strength must be non-negative"));
    }
    let mut classes: Vec<usize> = y.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::invalid("logistic regression needs at least 2 classes in training"));
    }
    let compact: Vec<usize> = y.iter().map(|c| classes.binary_search(c).expect("present")).collect();
    let k = classes.len();
    let d = x.ncols();
    let problem = LrProblem { x, y: compact, k, l2: cfg.l2 };
    let (theta, converged, iterations) = lbfgs(|t| problem.eval(t), vec![0.0; d * k + k], cfg.tol, cfg.max_iter, cfg.memory);
    if !converged {
        log::warn!("logistic regression stopped after {iterations} iterations without reaching tolerance {}", cfg.tol);
    }
    let (weights, bias) = problem.unpack(&theta);
    Ok(LogisticModel {
        weights,
        bias,
        classes,
        n_classes,
        converged,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    pub converged: bool,
    /// Set when LDA had to raise its shrinkage to invert the covariance.
    pub shrinkage_escalated: bool,
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

/// Standardizes with training statistics, fits LR, and scores `x_eval`.
pub fn logistic_regression(
    x_train: &Array2<f64>,
    y_train: &[usize],
    x_eval: &Array2<f64>,
    y_eval: &[usize],
    n_classes: usize,
    cfg: &LrConfig,
) -> Result<BaselineResult> {
    let scaler = Standardizer::fit(x_train)?;
    let model = fit_logistic(&scaler.transform(x_train), y_train, n_classes, cfg)?;
    let predictions = model.predict(&scaler.transform(x_eval));
    Ok(BaselineResult {
        accuracy: accuracy(&predictions, y_eval),
        predictions,
        converged: model.converged,
        shrinkage_escalated: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdaModel {
    /// features × fitted classes: Σ⁻¹μ_c
    pub coef: DMatrix<f64>,
    /// −½ μ_cᵀΣ⁻¹μ_c + ln π_c
    pub intercept: DVector<f64>,
    pub classes: Vec<usize>,
    pub n_classes: usize,
    pub shrinkage: f64,
    pub escalated: bool,
}

impl LdaModel {
    pub fn scores(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::from_elem((x.nrows(), self.n_classes), f64::MIN);
        for (i, row) in x.outer_iter().enumerate() {
            for (j, &c) in self.classes.iter().enumerate() {
                let s: f64 = row.iter().enumerate().map(|(f, v)| v * self.coef[(f, j)]).sum();
                out[[i, c]] = s + self.intercept[j];
            }
        }
        out
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<usize> {
        self.scores(x).outer_iter().map(argmax).collect()
    }
}

/// Shared-covariance LDA with shrinkage `Σγ = (1−γ)Σ + γ·diag(Σ)`.
/// If `Σγ` is not positive definite, γ doubles up to 1, then a ridge is added.
pub fn fit_lda(x: &Array2<f64>, y: &[usize], n_classes: usize, gamma: f64) -> Result<LdaModel> {
    let (n, d) = x.dim();
    if n != y.len() {
        return Err(Error::Shape(format!("{n} rows for {} labels", y.len())));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid("shrinkage must lie in [0, 1]"));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
        return Err(Error::invalid(format!("label {bad} outside [0, {n_classes})")));
    }
    let mut classes: Vec<usize> = y.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::invalid("LDA needs at least 2 classes in training"));
    }
    let k = classes.len();
    let mut means = DMatrix::zeros(d, k);
    let mut counts = vec![0usize; k];
    for (i, &c) in y.iter().enumerate() {
        let j = classes.binary_search(&c).expect("present");
        counts[j] += 1;
        for f in 0..d {
            means[(f, j)] += x[[i, f]];
        }
    }
    for j in 0..k {
        for f in 0..d {
            means[(f, j)] /= counts[j] as f64;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for (i, &c) in y.iter().enumerate() {
        let j = classes.binary_search(&c).expect("present");
        let r = DVector::from_fn(d, |f, _| x[[i, f]] - means[(f, j)]);
        cov += &r * r.transpose();
    }
    let dof = (n.saturating_sub(k)).max(1) as f64;
    cov /= dof;

    let shrink = |g: f64| {
        let mut s = &cov * (1.0 - g);
        for f in 0..d {
            s[(f, f)] += g * cov[(f, f)];
        }
        s
    };
    let mut g = gamma;
    let mut escalated = false;
    let chol = loop {
        if let Some(ch) = well_conditioned_cholesky(shrink(g)) {
            break ch;
        }
        escalated = true;
        if g >= 1.0 {
            let mut s = shrink(1.0);
            let ridge = 1e-6 * (s.trace() / d as f64).max(1.0);
            for f in 0..d {
                s[(f, f)] += ridge;
            }
            break well_conditioned_cholesky(s).ok_or_else(|| Error::Numerical("covariance not invertible after ridge".into()))?;
        }
        g = if g == 0.0 { 0.1 } else { (g * 2.0).min(1.0) };
    };
    if escalated {
        log::warn!("LDA shrinkage raised from {gamma} to {g}");
    }
    let coef = chol.solve(&means);
    let intercept = DVector::from_fn(k, |j, _| {
        let quad: f64 = (0..d).map(|f| means[(f, j)] * coef[(f, j)]).sum();
        -0.5 * quad + (counts[j] as f64 / n as f64).ln()
    });
    Ok(LdaModel {
        coef,
        intercept,
        classes,
        n_classes,
        shrinkage: g,
        escalated,
    })
}

/// Cholesky factor, rejected when a pivot is negligible against the largest
/// diagonal entry (rounding can let an exactly singular matrix through).
fn well_conditioned_cholesky(s: DMatrix<f64>) -> Option<Cholesky<f64, nalgebra::Dyn>> {
    let scale = s.diagonal().max();
    let ch = Cholesky::new(s)?;
    let l = ch.l_dirty();
    let ok = (0..l.nrows()).all(|i| l[(i, i)] * l[(i, i)] > 1e-10 * scale);
    ok.then_some(ch)
}

pub fn lda(
    x_train: &Array2<f64>,
    y_train: &[usize],
    x_eval: &Array2<f64>,
    y_eval: &[usize],
    n_classes: usize,
    gamma: f64,
) -> Result<BaselineResult> {
    let scaler = Standardizer::fit(x_train)?;
    let model = fit_lda(&scaler.transform(x_train), y_train, n_classes, gamma)?;
    let predictions = model.predict(&scaler.transform(x_eval));
    Ok(BaselineResult {
        accuracy: accuracy(&predictions, y_eval),
        predictions,
        converged: true,
        shrinkage_escalated: model.escalated,
    })
}

/// One-hot phoneme identity, the only metadata feature of the acoustic baseline.
pub fn phoneme_one_hot(labels: &[LabelRecord]) -> Array2<f64> {
    let mut x = Array2::zeros((labels.len(), Phoneme::ALL.len()));
    for (i, l) in labels.iter().enumerate() {
        x[[i, l.phoneme.index()]] = 1.0;
    }
    x
}

/// LR on one-hot phoneme metadata; trials without a target for `task` are skipped.
pub fn acoustic_only(train: &[LabelRecord], eval: &[LabelRecord], task: Task, cfg: &LrConfig) -> Result<BaselineResult> {
    let keep = |ls: &[LabelRecord]| -> (Vec<LabelRecord>, Vec<usize>) {
        ls.iter()
            .filter_map(|l| task.trial_target(l).map(|t| (l.clone(), t)))
            .unzip()
    };
    let (tr, ytr) = keep(train);
    let (ev, yev) = keep(eval);
    if ev.is_empty() {
        return Err(Error::invalid(format!("no evaluation trials with a {task} target")));
    }
    let model = fit_logistic(&phoneme_one_hot(&tr), &ytr, task.n_classes(), cfg)?;
    let predictions = model.predict(&phoneme_one_hot(&ev));
    Ok(BaselineResult {
        accuracy: accuracy(&predictions, &yev),
        predictions,
        converged: model.converged,
        shrinkage_escalated: false,
    })
}

/// Pooled-feature logistic regression as a LOSO decoder.
#[derive(Debug, Clone, Default)]
pub struct PooledLr {
    pub cfg: LrConfig,
}

impl crate::stats::loso::FoldDecoder for PooledLr {
    fn fit_predict(&self, train: &ItemSet, test: &ItemSet, task: Task, _seed: u64) -> Result<Array2<f64>> {
        let y: Vec<usize> = train.targets(task).into_iter().map(|t| t.expect("filtered")).collect();
        let xtr = pool_array(&train.data).matrix;
        let scaler = Standardizer::fit(&xtr)?;
        let model = fit_logistic(&scaler.transform(&xtr), &y, task.n_classes(), &self.cfg)?;
        Ok(model.logits(&scaler.transform(&pool_array(&test.data).matrix)))
    }
}

/// Pooled-feature shrinkage LDA as a LOSO decoder.
#[derive(Debug, Clone)]
pub struct PooledLda {
    pub gamma: f64,
}

impl Default for PooledLda {
    fn default() -> Self {
        PooledLda { gamma: 0.1 }
    }
}

impl crate::stats::loso::FoldDecoder for PooledLda {
    fn fit_predict(&self, train: &ItemSet, test: &ItemSet, task: Task, _seed: u64) -> Result<Array2<f64>> {
        let y: Vec<usize> = train.targets(task).into_iter().map(|t| t.expect("filtered")).collect();
        let xtr = pool_array(&train.data).matrix;
        let scaler = Standardizer::fit(&xtr)?;
        let model = fit_lda(&scaler.transform(&xtr), &y, task.n_classes(), self.gamma)?;
        Ok(model.scores(&scaler.transform(&pool_array(&test.data).matrix)))
    }
}
