//! The five subcommands.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use eegphon_core::baselines::{acoustic_only, LrConfig, PooledLda, PooledLr};
use eegphon_core::io::archive::save_epochs;
use eegphon_core::io::synth::{write_synthetic, SynthSpec};
use eegphon_core::rng::derive_seed;
use eegphon_core::split::{expanded_split, fixed_split, make_loso_folds};
use eegphon_core::stats::controls::{loso_permutation, EARLY_WINDOW_MS};
use eegphon_core::stats::loso::{position_wer, table_rows, write_folds_jsonl, write_table_csv};
use eegphon_core::stats::{bootstrap_ci, classification_metrics, mask_early_window, null_only, run_loso, summarize, FoldDecoder, LosoRun};
use eegphon_core::{EpochSet, ItemSet, SampleUnit, Task};
use eegphon_nn::checkpoint;
use eegphon_nn::decoder::predict_items;
use eegphon_nn::model::ensemble_logits;
use eegphon_nn::train::{train, write_history, TrainConfig, TrainData};
use eegphon_nn::{Model, ModelConfig};
use ndarray::{Array2, Axis};
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::{ControlsArgs, DecoderArg, EvalSetArg, EvaluateArgs, ModelArgs, PreprocessArgs, SplitArg, SynthArgs, TrainArgs};
use crate::error::{io_error, require_exists, CliError, CliResult};
use crate::pipeline::{conformer, feature_name, find_containers, load_archive, preprocess_all, read_json};
use crate::report::{create_dir, hash_path, to_value, with_output_hashes, write_json};

const PREDICT_BATCH: usize = 64;
const BOOTSTRAP_LEVEL: f64 = 0.95;

fn input_echo(path: &Path) -> CliResult<Value> {
    Ok(json!({ "path": path.display().to_string(), "hash": hash_path(path)? }))
}

pub fn synth(a: &SynthArgs) -> CliResult<()> {
    let mut spec = match &a.spec {
        Some(p) => read_json::<SynthSpec>(p, "synth spec")?,
        None => SynthSpec::default(),
    };
    spec.seed = a.seed;
    if let Some(n) = a.subjects {
        spec.n_subjects = n;
    }
    if let Some(amp) = a.amplitude {
        spec.template_amplitude_uv = amp;
    }
    spec.validate()?;
    create_dir(&a.output)?;
    let dirs = write_synthetic(&spec, &a.output)?;
    write_json(&a.output.join("spec.json"), &spec)?;
    let subjects: Vec<String> = dirs
        .iter()
        .map(|d| d.file_name().expect("subject dir").to_string_lossy().into_owned())
        .collect();
    let mut files: Vec<&str> = subjects.iter().map(String::as_str).collect();
    files.push("spec.json");
    let report = json!({
        "command": "synth",
        "config": {
            "seed": a.seed,
            "spec": spec,
            "spec_file": a.spec.as_deref().map(input_echo).transpose()?,
        },
        "subjects": subjects,
    });
    write_json(&a.output.join("report.json"), &with_output_hashes(report, &a.output, &files)?)?;
    println!("wrote {} subject containers to {}", dirs.len(), a.output.display());
    Ok(())
}

pub fn preprocess(a: &PreprocessArgs) -> CliResult<()> {
    let containers = find_containers(&a.input)?;
    let (epochs, params, subjects) = preprocess_all(&containers, a.feature, a.seed)?;
    let provenance = json!({
        "command": "preprocess",
        "feature": a.feature.as_str(),
        "seed": a.seed,
        "params": params,
        "input": input_echo(&a.input)?,
        "subjects": subjects,
    });
    if let Some(parent) = a.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_epochs(&a.output, &epochs, &provenance)?;
    println!(
        "wrote {} epochs ({} frames x {} features) to {}",
        epochs.len(),
        epochs.n_times(),
        epochs.n_features(),
        a.output.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct Scores {
    #[serde(flatten)]
    metrics: eegphon_core::stats::Metrics,
    wer_real: Option<f64>,
    wer_pseudo: Option<f64>,
    n_words_real: usize,
    n_words_pseudo: usize,
}

fn truths(items: &ItemSet, task: Task) -> Vec<usize> {
    items.targets(task).into_iter().map(|t| t.expect("items filtered by target")).collect()
}

fn score(items: &ItemSet, logits: &Array2<f64>, task: Task) -> CliResult<Scores> {
    let metrics = classification_metrics(logits, &truths(items, task), task.n_classes())?;
    let (wer_real, wer_pseudo, n_words_real, n_words_pseudo) = position_wer(items, logits)?;
    Ok(Scores {
        metrics,
        wer_real,
        wer_pseudo,
        n_words_real,
        n_words_pseudo,
    })
}

pub fn train_cmd(a: &TrainArgs) -> CliResult<()> {
    let (epochs, provenance) = load_archive(&a.input)?;
    let task: Task = a.task.into();
    let unit: SampleUnit = a.unit.into();
    let subjects = epochs.subjects();
    let split = match a.split {
        SplitArg::Fixed => fixed_split(&subjects)?,
        SplitArg::Expanded => expanded_split(&subjects)?,
        SplitArg::Loso => {
            return Err(CliError::validation(
                "train takes --split fixed or expanded; run `evaluate --split loso` for cross-validation",
            ))
        }
    };
    let items = ItemSet::from_epochs(&epochs, unit)?.with_target(task);
    let dec = conformer(&a.model, task)?;
    let tasks = dec.tasks_for(task);
    let train_items = items.for_subjects(split.train());
    let val_items = items.for_subjects(split.val());
    let test_items = items.for_subjects(split.test());
    if train_items.is_empty() {
        return Err(CliError::validation(format!("no {task} items from the training subjects")));
    }
    let model_cfg = ModelConfig {
        tasks: tasks.clone(),
        ..dec.model.clone()
    };
    let train_cfg = TrainConfig {
        seed: derive_seed(a.seed, &[2]),
        ..dec.train.clone()
    };
    let model = Model::new(model_cfg.clone(), items.n_features(), derive_seed(a.seed, &[1]))?;
    let tr = TrainData::from_items(&train_items, &tasks);
    let va = (!val_items.is_empty()).then(|| TrainData::from_items(&val_items, &tasks));
    log::info!("training on {} items, validating on {}", tr.len(), val_items.len());
    let outcome = train(&model, &tr, va.as_ref(), &train_cfg)?;

    let config = json!({
        "command": "train",
        "task": task,
        "unit": unit,
        "feature": feature_name(&provenance, &epochs),
        "split": a.split,
        "split_subjects": { "train": split.train(), "val": split.val(), "test": split.test() },
        "seed": a.seed,
        "multi_task": dec.multi_task,
        "model": model_cfg,
        "train": train_cfg,
        "input": input_echo(&a.input)?,
    });
    create_dir(&a.output)?;
    checkpoint::save(&a.output.join("checkpoint.bin"), &outcome.model, &config)?;
    write_history(&a.output.join("history.jsonl"), &outcome.history)?;
    let mut eval = serde_json::Map::new();
    for (name, set) in [("val", &val_items), ("test", &test_items)] {
        if !set.is_empty() {
            let logits = predict_items(&outcome.model, set, task, PREDICT_BATCH)?;
            eval.insert(name.to_string(), to_value(&score(set, &logits, task)?));
        }
    }
    let report = json!({
        "config": config,
        "n_items": { "train": train_items.len(), "val": val_items.len(), "test": test_items.len() },
        "epochs_run": outcome.epochs_run,
        "best_epoch": outcome.best_epoch,
        "parameters": outcome.model.param_count(),
        "eval": eval,
    });
    let report = with_output_hashes(report, &a.output, &["checkpoint.bin", "history.jsonl"])?;
    write_json(&a.output.join("report.json"), &report)?;
    println!("trained for {} epochs; outputs in {}", outcome.epochs_run, a.output.display());
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> CliResult<()> {
    if a.checkpoint.is_empty() {
        if a.ensemble {
            return Err(CliError::validation("--ensemble needs two --checkpoint values"));
        }
        evaluate_loso(a)
    } else {
        evaluate_checkpoints(a)
    }
}

/// One scored checkpoint with the keys aligning its rows across archives.
struct Member {
    task: Task,
    unit: SampleUnit,
    items: ItemSet,
    logits: Array2<f64>,
    keys: Vec<(String, usize, usize)>,
    echo: Value,
}

fn parse_echo<T: serde::de::DeserializeOwned>(echo: &Value, field: &str, path: &Path) -> CliResult<T> {
    serde_json::from_value(echo[field].clone())
        .map_err(|e| CliError::validation(format!("checkpoint {}: config field `{field}`: {e}", path.display())))
}

fn load_member(ckpt: &Path, input: &Path, eval_set: EvalSetArg) -> CliResult<Member> {
    require_exists(ckpt, "checkpoint")?;
    let (model, header) = checkpoint::load(ckpt)?;
    let task: Task = parse_echo(&header.config, "task", ckpt)?;
    let unit: SampleUnit = parse_echo(&header.config, "unit", ckpt)?;
    let (epochs, _) = load_archive(input)?;
    if epochs.n_features() != header.n_features {
        return Err(CliError::validation(format!(
            "checkpoint {} expects {} features, archive {} has {}",
            ckpt.display(),
            header.n_features,
            input.display(),
            epochs.n_features()
        )));
    }
    let items = ItemSet::from_epochs(&epochs, unit)?.with_target(task);
    let items = match eval_set {
        EvalSetArg::All => items,
        EvalSetArg::Val | EvalSetArg::Test => {
            let field = if eval_set == EvalSetArg::Val { "val" } else { "test" };
            let subjects: BTreeSet<String> = serde_json::from_value(header.config["split_subjects"][field].clone())
                .map_err(|e| CliError::validation(format!("checkpoint {}: split subjects: {e}", ckpt.display())))?;
            items.for_subjects(&subjects)
        }
    };
    if items.is_empty() {
        return Err(CliError::validation(format!(
            "no {task} items in the {} subjects of {}",
            format!("{eval_set:?}").to_lowercase(),
            input.display()
        )));
    }
    let logits = predict_items(&model, &items, task, PREDICT_BATCH)?;
    let keys = items
        .items
        .iter()
        .map(|it| (it.subject().to_string(), epochs.event_index[it.epoch], it.position))
        .collect();
    Ok(Member {
        task,
        unit,
        items,
        logits,
        keys,
        echo: json!({ "checkpoint": input_echo(ckpt)?, "input": input_echo(input)?, "config": header.config }),
    })
}

fn evaluate_checkpoints(a: &EvaluateArgs) -> CliResult<()> {
    let n = a.checkpoint.len();
    if n > 2 {
        return Err(CliError::validation("at most two --checkpoint values"));
    }
    if a.ensemble && n != 2 {
        return Err(CliError::validation("--ensemble needs exactly two --checkpoint values"));
    }
    if a.input.len() != 1 && a.input.len() != n {
        return Err(CliError::validation("give one --input, or one per --checkpoint"));
    }
    let members: Vec<Member> = (0..n)
        .map(|i| load_member(&a.checkpoint[i], &a.input[i.min(a.input.len() - 1)], a.eval_set))
        .collect::<CliResult<_>>()?;
    let mut scored = Vec::new();
    for m in &members {
        scored.push(json!({ "source": m.echo, "task": m.task, "n_items": m.items.len(), "scores": score(&m.items, &m.logits, m.task)? }));
    }
    let mut report = json!({
        "config": {
            "command": "evaluate",
            "mode": "checkpoint",
            "eval_set": a.eval_set,
            "ensemble": a.ensemble,
            "seed": a.seed,
        },
        "members": scored,
    });
    if a.ensemble {
        report["ensemble"] = ensemble_report(&members[0], &members[1])?;
    }
    create_dir(&a.output)?;
    write_json(&a.output.join("report.json"), &report)?;
    println!("evaluated {n} checkpoint(s); report in {}", a.output.display());
    Ok(())
}

/// Scores the logit average on items present for both members.
fn ensemble_report(x: &Member, y: &Member) -> CliResult<Value> {
    if x.task != y.task || x.unit != y.unit {
        return Err(CliError::validation(format!(
            "ensemble members disagree on task/unit ({}/{:?} vs {}/{:?})",
            x.task, x.unit, y.task, y.unit
        )));
    }
    let index: BTreeMap<&(String, usize, usize), usize> = y.keys.iter().enumerate().map(|(i, k)| (k, i)).collect();
    let (ia, ib): (Vec<usize>, Vec<usize>) = x
        .keys
        .iter()
        .enumerate()
        .filter_map(|(i, k)| index.get(k).map(|&j| (i, j)))
        .unzip();
    if ia.is_empty() {
        return Err(CliError::validation("ensemble members share no items"));
    }
    let items = x.items.select(&ia);
    let la = x.logits.select(Axis(0), &ia);
    let lb = y.logits.select(Axis(0), &ib);
    let preds = ensemble_logits(&la, &lb)?;
    let mean = (&la + &lb) * 0.5;
    let s = score(&items, &mean, x.task)?;
    let accuracy = |p: &[usize]| p.iter().zip(truths(&items, x.task)).filter(|(a, b)| **a == *b).count() as f64 / p.len() as f64;
    debug_assert_eq!(accuracy(&preds), s.metrics.accuracy);
    let member_acc = |l: &Array2<f64>| accuracy(&l.outer_iter().map(eegphon_core::stats::metrics::argmax).collect::<Vec<_>>());
    Ok(json!({
        "n_aligned": ia.len(),
        "member_accuracy_on_aligned": [member_acc(&la), member_acc(&lb)],
        "scores": s,
    }))
}

fn decoder_for(kind: DecoderArg, model: &ModelArgs, task: Task) -> CliResult<(Box<dyn FoldDecoder>, Value)> {
    Ok(match kind {
        DecoderArg::Conformer => {
            let dec = conformer(model, task)?;
            let echo = to_value(&dec);
            (Box::new(dec), echo)
        }
        DecoderArg::Lr => {
            let dec = PooledLr::default();
            let echo = json!({ "l2": dec.cfg.l2, "tol": dec.cfg.tol, "max_iter": dec.cfg.max_iter, "memory": dec.cfg.memory });
            (Box::new(dec), echo)
        }
        DecoderArg::Lda => {
            let dec = PooledLda::default();
            let echo = json!({ "gamma": dec.gamma });
            (Box::new(dec), echo)
        }
    })
}

#[derive(Debug, Serialize)]
struct SummaryRow<'a> {
    feature: &'a str,
    task: &'a str,
    decoder: &'a str,
    accuracy_mean: f64,
    accuracy_std: f64,
    macro_f1_mean: f64,
    top3_mean: f64,
    chance: f64,
    folds: usize,
    failed: usize,
    samples: usize,
}

/// Writes `folds.jsonl`, `table.csv` (WER rows) and `summary.csv`.
fn write_loso_outputs(dir: &Path, run: &LosoRun, feature: &str, decoder: DecoderArg) -> CliResult<Vec<&'static str>> {
    create_dir(dir)?;
    write_folds_jsonl(&dir.join("folds.jsonl"), run)?;
    write_table_csv(&dir.join("table.csv"), &table_rows(run, feature, "loso"))?;
    let s = &run.summary;
    let decoder = serde_json::to_value(decoder).expect("enum serializes");
    let row = SummaryRow {
        feature,
        task: s.task.as_str(),
        decoder: decoder.as_str().unwrap_or_default(),
        accuracy_mean: s.accuracy.mean,
        accuracy_std: s.accuracy.std,
        macro_f1_mean: s.macro_f1.mean,
        top3_mean: s.top3.mean,
        chance: 1.0 / s.task.n_classes() as f64,
        folds: s.completed,
        failed: s.failed,
        samples: s.n_samples,
    };
    let path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    w.serialize(&row).map_err(|e| CliError::Runtime(e.to_string()))?;
    w.flush().map_err(|e| io_error(&path, e))?;
    Ok(vec!["folds.jsonl", "table.csv", "summary.csv"])
}

fn require_task(task: Option<crate::args::TaskArg>) -> CliResult<Task> {
    task.map(Into::into).ok_or_else(|| CliError::validation("--task is required for cross-validation"))
}

fn evaluate_loso(a: &EvaluateArgs) -> CliResult<()> {
    if a.split != SplitArg::Loso {
        return Err(CliError::validation("fixed and expanded splits are evaluated from a --checkpoint made by `train`"));
    }
    if a.input.len() != 1 {
        return Err(CliError::validation("cross-validation takes exactly one --input"));
    }
    let task = require_task(a.task)?;
    let input = &a.input[0];
    let (epochs, provenance) = load_archive(input)?;
    let feature = feature_name(&provenance, &epochs);
    let items = ItemSet::from_epochs(&epochs, a.unit.into())?;
    let (decoder, decoder_echo) = decoder_for(a.decoder, &a.model, task)?;
    let run = run_loso(&items, task, decoder.as_ref(), a.seed)?;
    let files = write_loso_outputs(&a.output, &run, &feature, a.decoder)?;
    let report = json!({
        "config": {
            "command": "evaluate",
            "mode": "loso",
            "task": task,
            "unit": a.unit,
            "feature": feature,
            "decoder": a.decoder,
            "decoder_config": decoder_echo,
            "seed": a.seed,
            "input": input_echo(input)?,
        },
        "summary": run.summary,
    });
    write_json(&a.output.join("report.json"), &with_output_hashes(report, &a.output, &files)?)?;
    println!(
        "LOSO {task}: accuracy {:.3} ± {:.3} over {} folds; outputs in {}",
        run.summary.accuracy.mean,
        run.summary.accuracy.std,
        run.summary.completed,
        a.output.display()
    );
    Ok(())
}

/// Acoustic-only baseline in every LOSO fold over trial labels.
fn acoustic_folds(epochs: &EpochSet, task: Task) -> CliResult<Value> {
    let subjects = epochs.subjects();
    let folds = make_loso_folds(&subjects)?;
    let mut rows = Vec::new();
    let mut accs = Vec::new();
    for (fold_id, split) in folds.iter().enumerate() {
        let train: Vec<_> = epochs.labels.iter().filter(|l| split.train().contains(&l.subject)).cloned().collect();
        let test: Vec<_> = epochs.labels.iter().filter(|l| split.test().contains(&l.subject)).cloned().collect();
        let subject = split.test_subject().unwrap_or_default();
        match acoustic_only(&train, &test, task, &LrConfig::default()) {
            Ok(r) => {
                accs.push(r.accuracy);
                rows.push(json!({ "fold_id": fold_id, "test_subject": subject, "accuracy": r.accuracy, "n_samples": r.predictions.len(), "converged": r.converged }));
            }
            Err(e) => rows.push(json!({ "fold_id": fold_id, "test_subject": subject, "failed": e.to_string() })),
        }
    }
    let summary = if accs.is_empty() { None } else { Some(summarize(&accs)?) };
    Ok(json!({ "folds": rows, "accuracy": summary }))
}

pub fn controls(a: &ControlsArgs) -> CliResult<()> {
    let task: Task = a.task.into();
    let (mut epochs, provenance) = load_archive(&a.input)?;
    let feature = feature_name(&provenance, &epochs);
    if a.null_only {
        epochs = null_only(&epochs);
    }
    if epochs.is_empty() {
        return Err(CliError::validation("no trials left after NULL-only filtering"));
    }
    if a.mask_early {
        epochs = mask_early_window(&epochs, EARLY_WINDOW_MS);
    }
    let items = ItemSet::from_epochs(&epochs, a.unit.into())?;
    let (decoder, decoder_echo) = decoder_for(a.decoder, &a.model, task)?;
    let run = run_loso(&items, task, decoder.as_ref(), a.seed)?;
    let accs: Vec<f64> = run.reports().map(|r| r.accuracy).collect();
    let ci = if a.bootstrap > 0 {
        let (lo, hi) = bootstrap_ci(&accs, a.bootstrap, BOOTSTRAP_LEVEL, derive_seed(a.seed, &[3]))?;
        Some(json!({ "level": BOOTSTRAP_LEVEL, "resamples": a.bootstrap, "lo": lo, "hi": hi }))
    } else {
        None
    };
    let permutation = if a.permute > 0 {
        let folds = loso_permutation(&items, task, a.permute, &LrConfig::default(), derive_seed(a.seed, &[4]))?;
        Some(to_value(&folds))
    } else {
        None
    };
    let files = write_loso_outputs(&a.output, &run, &feature, a.decoder)?;
    let report = json!({
        "config": {
            "command": "controls",
            "task": task,
            "unit": a.unit,
            "feature": feature,
            "null_only": a.null_only,
            "mask_early": a.mask_early,
            "mask_ms": if a.mask_early { Some(EARLY_WINDOW_MS) } else { None },
            "permute": a.permute,
            "permutation_decoder": if a.permute > 0 { Some(to_value(&LrConfig::default())) } else { None },
            "bootstrap": a.bootstrap,
            "decoder": a.decoder,
            "decoder_config": decoder_echo,
            "seed": a.seed,
            "input": input_echo(&a.input)?,
        },
        "n_trials": epochs.len(),
        "chance": 1.0 / task.n_classes() as f64,
        "loso": run.summary,
        "bootstrap_ci": ci,
        "acoustic_only": acoustic_folds(&epochs, task)?,
        "permutation": permutation,
    });
    write_json(&a.output.join("report.json"), &with_output_hashes(report, &a.output, &files)?)?;
    println!("controls for {task}: accuracy {:.3}; report in {}", run.summary.accuracy.mean, a.output.display());
    Ok(())
}

/// Runs the parsed command.
pub fn run(cmd: &crate::args::Command) -> CliResult<()> {
    use crate::args::Command::*;
    match cmd {
        Synth(a) => synth(a),
        Preprocess(a) => preprocess(a),
        Train(a) => train_cmd(a),
        Evaluate(a) => evaluate(a),
        Controls(a) => controls(a),
    }
}
