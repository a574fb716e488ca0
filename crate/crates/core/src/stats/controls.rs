//! Confound controls: early-window masking, NULL-only filtering and the
//! block-aware label permutation test.

use std::collections::BTreeMap;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_logistic, pool_array, LrConfig, Standardizer};
use crate::epochs::{EpochSet, ItemSet};
use crate::error::{Error, Result};
use crate::labels::{TmsCondition, Task};
use crate::rng::stream;

pub const EARLY_WINDOW_MS: (f64, f64) = (0.0, 200.0);

/// Zeroes every frame whose onset-relative time lies in `[lo, hi)`.
pub fn mask_early_window(epochs: &EpochSet, mask_ms: (f64, f64)) -> EpochSet {
    let mut out = epochs.clone();
    let (a, b) = epochs.frame_range(mask_ms.0, mask_ms.1);
    if a < b {
        out.data.slice_mut(s![.., a..b, ..]).fill(0.0);
    }
    out
}

/// Trials recorded under the NULL (no stimulation) condition.
pub fn null_only(epochs: &EpochSet) -> EpochSet {
    epochs.filter(|l| l.tms == TmsCondition::Null)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationReport {
    pub true_acc: f64,
    pub perm_accs: Vec<f64>,
    pub empirical_p: f64,
}

/// Add-one empirical p: `(1 + #{perm ≥ true}) / (1 + n_perm)`.
pub fn empirical_p(true_acc: f64, perm_accs: &[f64]) -> f64 {
    let hits = perm_accs.iter().filter(|&&a| a >= true_acc).count();
    (1 + hits) as f64 / (1 + perm_accs.len()) as f64
}

/// Shuffles `labels` inside each block. Blocks with fewer than two members are
/// left as they are.
pub fn permute_within_blocks<R: rand::Rng>(labels: &[usize], blocks: &[u64], rng: &mut R) -> Vec<usize> {
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, &b) in blocks.iter().enumerate() {
        groups.entry(b).or_default().push(i);
    }
    let mut out = labels.to_vec();
    for idx in groups.values() {
        if idx.len() < 2 {
            continue;
        }
        let mut vals: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        vals.shuffle(rng);
        for (&i, v) in idx.iter().zip(vals) {
            out[i] = v;
        }
    }
    out
}

fn lr_accuracy(x_train: &Array2<f64>, y_train: &[usize], x_test: &Array2<f64>, y_test: &[usize], n_classes: usize, cfg: &LrConfig) -> Result<f64> {
    let model = fit_logistic(x_train, y_train, n_classes, cfg)?;
    let pred = model.predict(x_test);
    Ok(pred.iter().zip(y_test).filter(|(p, t)| p == t).count() as f64 / y_test.len() as f64)
}

/// Trains the pooled-LR decoder on true and on block-permuted training labels
/// and scores each on the untouched test labels. Permutation `k` draws from
/// `stream(seed, &[fold_id, k])`.
#[allow(clippy::too_many_arguments)]
pub fn block_permutation_test(
    x_train: &Array2<f64>,
    y_train: &[usize],
    blocks: &[u64],
    x_test: &Array2<f64>,
    y_test: &[usize],
    n_classes: usize,
    n_perm: usize,
    cfg: &LrConfig,
    seed: u64,
    fold_id: u64,
) -> Result<PermutationReport> {
    if blocks.len() != y_train.len() || x_train.nrows() != y_train.len() || x_test.nrows() != y_test.len() {
        return Err(Error::Shape("features, labels and blocks must align".into()));
    }
    if y_test.is_empty() {
        return Err(Error::invalid("no test trials"));
    }
    if n_perm == 0 {
        return Err(Error::invalid("need at least one permutation"));
    }
    let mut sizes: BTreeMap<u64, usize> = BTreeMap::new();
    for &b in blocks {
        *sizes.entry(b).or_default() += 1;
    }
    let degenerate = sizes.values().filter(|&&n| n < 2).count();
    if degenerate > 0 {
        log::warn!("{degenerate} of {} permutation blocks hold a single trial and stay unpermuted", sizes.len());
    }
    let scaler = Standardizer::fit(x_train)?;
    let xtr = scaler.transform(x_train);
    let xte = scaler.transform(x_test);
    let true_acc = lr_accuracy(&xtr, y_train, &xte, y_test, n_classes, cfg)?;
    let perm_accs = (0..n_perm)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream(seed, &[fold_id, k as u64]);
            let y = permute_within_blocks(y_train, blocks, &mut rng);
            lr_accuracy(&xtr, &y, &xte, y_test, n_classes, cfg)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(PermutationReport {
        true_acc,
        empirical_p: empirical_p(true_acc, &perm_accs),
        perm_accs,
    })
}

/// Block key of a trial: its subject together with its TMS condition.
pub fn tms_block_keys(items: &ItemSet) -> Vec<u64> {
    let mut keys: BTreeMap<(String, TmsCondition), u64> = BTreeMap::new();
    items
        .items
        .iter()
        .map(|it| {
            let next = keys.len() as u64;
            *keys.entry((it.subject().to_string(), it.label.tms)).or_insert(next)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPermutation {
    pub fold_id: usize,
    pub test_subject: String,
    pub report: PermutationReport,
}

/// Block permutation test in every LOSO fold on pooled features.
pub fn loso_permutation(items: &ItemSet, task: Task, n_perm: usize, cfg: &LrConfig, seed: u64) -> Result<Vec<FoldPermutation>> {
    let items = items.with_target(task);
    let mut subjects: Vec<String> = items.items.iter().map(|i| i.subject().to_string()).collect();
    subjects.sort();
    subjects.dedup();
    let folds = crate::split::make_loso_folds(&subjects)?;
    folds
        .iter()
        .enumerate()
        .map(|(fold_id, split)| {
            let train = items.for_subjects(split.train());
            let test = items.for_subjects(split.test());
            super::loso::audit_fold(&train, &test)?;
            let y = |set: &ItemSet| -> Vec<usize> { set.targets(task).into_iter().map(|t| t.expect("filtered")).collect() };
            let report = block_permutation_test(
                &pool_array(&train.data).matrix,
                &y(&train),
                &tms_block_keys(&train),
                &pool_array(&test.data).matrix,
                &y(&test),
                task.n_classes(),
                n_perm,
                cfg,
                seed,
                fold_id as u64,
            )?;
            Ok(FoldPermutation {
                fold_id,
                test_subject: split.test_subject().unwrap_or_default().to_string(),
                report,
            })
        })
        .collect()
}
