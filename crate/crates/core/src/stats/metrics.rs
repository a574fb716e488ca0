//! Classification metrics and phoneme-sequence error rates.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unit-cost edit distance (insertions, deletions, substitutions).
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Mean over words of `levenshtein(ref, hyp) / len(ref)`.
pub fn wer<T: PartialEq>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::invalid(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    if refs.is_empty() {
        return Err(Error::invalid("no words to score"));
    }
    let mut total = 0.0;
    for (i, (r, h)) in refs.iter().zip(hyps).enumerate() {
        if r.is_empty() {
            return Err(Error::invalid(format!("reference word {i} is empty")));
        }
        total += levenshtein(r, h) as f64 / r.len() as f64;
    }
    Ok(total / refs.len() as f64)
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest values, ties broken by lower index.
pub fn top_k(row: ArrayView1<f64>, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n_samples: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub top3: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

/// Accuracy, macro-F1 (over classes present in `truths`), top-3 and confusion
/// from per-sample logits (`samples × classes`).
pub fn classification_metrics(logits: &Array2<f64>, truths: &[usize], n_classes: usize) -> Result<Metrics> {
    let (n, c) = logits.dim();
    if c != n_classes {
        return Err(Error::Shape(format!("logits have {c} columns for {n_classes} classes")));
    }
    if n != truths.len() {
        return Err(Error::Shape(format!("{n} logit rows for {} labels", truths.len())));
    }
    if n == 0 {
        return Err(Error::invalid("no samples to score"));
    }
    if let Some(&bad) = truths.iter().find(|&&t| t >= n_classes) {
        return Err(Error::invalid(format!("label {bad} outside [0, {n_classes})")));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite logits"));
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    let mut top3_hits = 0usize;
    for (i, &t) in truths.iter().enumerate() {
        let row = logits.row(i);
        confusion[t][argmax(row)] += 1;
        if top_k(row, 3).contains(&t) {
            top3_hits += 1;
        }
    }
    let correct: usize = (0..n_classes).map(|k| confusion[k][k]).sum();
    let mut f1_sum = 0.0;
    let mut present = 0usize;
    for k in 0..n_classes {
        let support: usize = confusion[k].iter().sum();
        if support == 0 {
            continue;
        }
        present += 1;
        let tp = confusion[k][k];
        let predicted: usize = (0..n_classes).map(|r| confusion[r][k]).sum();
        let denom = support + predicted;
        f1_sum += if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
    }
    Ok(Metrics {
        n_samples: n,
        accuracy: correct as f64 / n as f64,
        macro_f1: f1_sum / present as f64,
        top3: top3_hits as f64 / n as f64,
        confusion,
    })
}

/// Metrics from hard predictions, scored as one-hot logits. Top-3 ranks the
/// unpredicted classes by index.
pub fn metrics_from_predictions(preds: &[usize], truths: &[usize], n_classes: usize) -> Result<Metrics> {
    if let Some(&bad) = preds.iter().find(|&&p| p >= n_classes) {
        return Err(Error::invalid(format!("prediction {bad} outside [0, {n_classes})")));
    }
    let logits = Array2::from_shape_fn((preds.len(), n_classes), |(i, k)| f64::from(u8::from(preds[i] == k)));
    classification_metrics(&logits, truths, n_classes)
}
