//! Leave-one-subject-out evaluation: per-fold metrics, WER by word type,
//! summaries and report emission.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::hypothesis::{summarize, Summary};
use super::metrics::{argmax, classification_metrics, wer};
use crate::epochs::{ItemSet, SampleUnit};
use crate::error::{Error, Result};
use crate::labels::{Lexicality, Phoneme, Task};
use crate::rng::derive_seed;
use crate::split::make_loso_folds;

/// Anything that can be trained on one fold and score the held-out items.
pub trait FoldDecoder: Sync {
    /// Returns `test.len() × task.n_classes()` logits. Both sets contain only
    /// items with a defined target for `task`.
    fn fit_predict(&self, train: &ItemSet, test: &ItemSet, task: Task, seed: u64) -> Result<Array2<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold_id: usize,
    pub test_subject: String,
    pub train_subjects: Vec<String>,
    pub n_samples: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub top3: f64,
    pub confusion: Vec<Vec<usize>>,
    pub wer_real: Option<f64>,
    pub wer_pseudo: Option<f64>,
    pub n_words_real: usize,
    pub n_words_pseudo: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum FoldOutcome {
    Completed(FoldReport),
    Failed {
        fold_id: usize,
        test_subject: String,
        reason: String,
    },
}

impl FoldOutcome {
    pub fn report(&self) -> Option<&FoldReport> {
        match self {
            FoldOutcome::Completed(r) => Some(r),
            FoldOutcome::Failed { .. } => None,
        }
    }
}

/// Mean and population std over completed folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LosoSummary {
    pub task: Task,
    pub completed: usize,
    pub failed: usize,
    pub n_samples: usize,
    pub accuracy: Summary,
    pub macro_f1: Summary,
    pub top3: Summary,
    pub wer_real: Option<Summary>,
    pub wer_pseudo: Option<Summary>,
    pub n_words_real: usize,
    pub n_words_pseudo: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LosoRun {
    pub folds: Vec<FoldOutcome>,
    pub summary: LosoSummary,
}

impl LosoRun {
    pub fn reports(&self) -> impl Iterator<Item = &FoldReport> {
        self.folds.iter().filter_map(FoldOutcome::report)
    }
}

/// Phoneme-level WER of the CVC words in `test`, split by lexicality. A word is
/// scored when all of its positions are present; its hypothesis is the argmax
/// of every position item.
pub fn position_wer(test: &ItemSet, logits: &Array2<f64>) -> Result<(Option<f64>, Option<f64>, usize, usize)> {
    if test.unit != SampleUnit::Position || logits.ncols() != Task::Phoneme.n_classes() {
        return Ok((None, None, 0, 0));
    }
    let mut words: BTreeMap<(&str, usize), Vec<(usize, usize)>> = BTreeMap::new();
    for (i, item) in test.items.iter().enumerate() {
        words.entry((item.subject(), item.epoch)).or_default().push((item.position, i));
    }
    let mut refs: [Vec<Vec<Phoneme>>; 2] = Default::default();
    let mut hyps: [Vec<Vec<Phoneme>>; 2] = Default::default();
    for positions in words.values_mut() {
        let label = &test.items[positions[0].1].label;
        let Some(lex) = label.lexicality else { continue };
        if label.word_phonemes.len() != 3 || positions.len() != 3 {
            continue;
        }
        positions.sort_unstable();
        let hyp: Vec<Phoneme> = positions
            .iter()
            .map(|&(_, i)| Phoneme::from_index(argmax(logits.row(i))).expect("phoneme logits"))
            .collect();
        let slot = usize::from(lex == Lexicality::Pseudo);
        refs[slot].push(label.word_phonemes.clone());
        hyps[slot].push(hyp);
    }
    let score = |slot: usize| -> Result<Option<f64>> {
        if refs[slot].is_empty() {
            Ok(None)
        } else {
            wer(&refs[slot], &hyps[slot]).map(Some)
        }
    };
    Ok((score(0)?, score(1)?, refs[0].len(), refs[1].len()))
}

/// Checks that no subject contributes items to both sides of a fold.
pub fn audit_fold(train: &ItemSet, test: &ItemSet) -> Result<()> {
    let tr: BTreeSet<&str> = train.items.iter().map(|i| i.subject()).collect();
    if let Some(s) = test.items.iter().map(|i| i.subject()).find(|s| tr.contains(s)) {
        return Err(Error::invalid(format!("subject {s} appears in both train and test of a fold")));
    }
    Ok(())
}

fn run_fold(
    fold_id: usize,
    items: &ItemSet,
    train_subjects: &BTreeSet<String>,
    test_subjects: &BTreeSet<String>,
    task: Task,
    decoder: &dyn FoldDecoder,
    seed: u64,
) -> Result<FoldReport> {
    let train = items.for_subjects(train_subjects);
    let test = items.for_subjects(test_subjects);
    audit_fold(&train, &test)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("fold has no training or no test items"));
    }
    let logits = decoder.fit_predict(&train, &test, task, derive_seed(seed, &[fold_id as u64]))?;
    let truths: Vec<usize> = test.targets(task).into_iter().map(|t| t.expect("filtered")).collect();
    let m = classification_metrics(&logits, &truths, task.n_classes())?;
    let (wer_real, wer_pseudo, n_words_real, n_words_pseudo) = if task == Task::Phoneme {
        position_wer(&test, &logits)?
    } else {
        (None, None, 0, 0)
    };
    Ok(FoldReport {
        fold_id,
        test_subject: test_subjects.iter().next().cloned().unwrap_or_default(),
        train_subjects: train_subjects.iter().cloned().collect(),
        n_samples: m.n_samples,
        accuracy: m.accuracy,
        macro_f1: m.macro_f1,
        top3: m.top3,
        confusion: m.confusion,
        wer_real,
        wer_pseudo,
        n_words_real,
        n_words_pseudo,
    })
}

/// One fold per subject. Failed folds are kept in the output, flagged, and
/// excluded from the summary.
pub fn run_loso(items: &ItemSet, task: Task, decoder: &dyn FoldDecoder, seed: u64) -> Result<LosoRun> {
    let items = items.with_target(task);
    let subjects: BTreeSet<&str> = items.items.iter().map(|i| i.subject()).collect();
    let subjects: Vec<&str> = subjects.into_iter().collect();
    let folds = make_loso_folds(&subjects)?;
    let outcomes: Vec<FoldOutcome> = folds
        .par_iter()
        .enumerate()
        .map(|(fold_id, split)| {
            let subject = split.test_subject().unwrap_or_default().to_string();
            match run_fold(fold_id, &items, split.train(), split.test(), task, decoder, seed) {
                Ok(r) => {
                    log::info!("fold {fold_id} ({subject}): accuracy {:.3}", r.accuracy);
                    FoldOutcome::Completed(r)
                }
                Err(e) => {
                    log::warn!("fold {fold_id} ({subject}) failed and is excluded from the summary: {e}");
                    FoldOutcome::Failed {
                        fold_id,
                        test_subject: subject,
                        reason: e.to_string(),
                    }
                }
            }
        })
        .collect();
    let summary = summarize_folds(&outcomes, task)?;
    Ok(LosoRun { folds: outcomes, summary })
}

pub fn summarize_folds(outcomes: &[FoldOutcome], task: Task) -> Result<LosoSummary> {
    let done: Vec<&FoldReport> = outcomes.iter().filter_map(FoldOutcome::report).collect();
    if done.is_empty() {
        return Err(Error::Numerical("every LOSO fold failed".into()));
    }
    let pick = |f: fn(&FoldReport) -> f64| summarize(&done.iter().map(|r| f(r)).collect::<Vec<_>>());
    let opt = |f: fn(&FoldReport) -> Option<f64>| -> Result<Option<Summary>> {
        let v: Vec<f64> = done.iter().filter_map(|r| f(r)).collect();
        if v.is_empty() {
            Ok(None)
        } else {
            summarize(&v).map(Some)
        }
    };
    Ok(LosoSummary {
        task,
        completed: done.len(),
        failed: outcomes.len() - done.len(),
        n_samples: done.iter().map(|r| r.n_samples).sum(),
        accuracy: pick(|r| r.accuracy)?,
        macro_f1: pick(|r| r.macro_f1)?,
        top3: pick(|r| r.top3)?,
        wer_real: opt(|r| r.wer_real)?,
        wer_pseudo: opt(|r| r.wer_pseudo)?,
        n_words_real: done.iter().map(|r| r.n_words_real).sum(),
        n_words_pseudo: done.iter().map(|r| r.n_words_pseudo).sum(),
    })
}

/// One fold outcome per line.
pub fn write_folds_jsonl(path: &Path, run: &LosoRun) -> Result<()> {
    let mut out = Vec::new();
    for f in &run.folds {
        serde_json::to_writer(&mut out, f).map_err(|e| Error::invalid(e.to_string()))?;
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut file| file.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

/// Row of the WER results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub feature: String,
    pub word_type: String,
    pub eval: String,
    pub wer_mean: f64,
    pub wer_std: f64,
    pub folds: usize,
    pub samples: usize,
}

/// Real and pseudoword rows for whichever word types were scored.
pub fn table_rows(run: &LosoRun, feature: &str, eval: &str) -> Vec<TableRow> {
    let s = &run.summary;
    [("real", &s.wer_real, s.n_words_real), ("pseudo", &s.wer_pseudo, s.n_words_pseudo)]
        .into_iter()
        .filter_map(|(word_type, summary, samples)| {
            summary.as_ref().map(|w| TableRow {
                feature: feature.to_string(),
                word_type: word_type.to_string(),
                eval: eval.to_string(),
                wer_mean: w.mean,
                wer_std: w.std,
                folds: w.n,
                samples,
            })
        })
        .collect()
}

pub fn write_table_csv(path: &Path, rows: &[TableRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::invalid(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
