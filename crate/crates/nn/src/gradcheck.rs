//! Central finite-difference check of the full training objective.

use std::collections::BTreeMap;

use eegphon_core::{Result, Task};
use serde::Serialize;

use crate::graph::Graph;
use crate::loss::{class_counts, class_weights};
use crate::model::{Mode, Model};
use crate::train::{batch_loss, TrainConfig, TrainData};

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub n_checked: usize,
    pub n_within: usize,
    pub tolerance: f64,
    pub worst_rel: f64,
    pub worst_param: String,
}

impl GradCheckReport {
    pub fn fraction_within(&self) -> f64 {
        self.n_within as f64 / self.n_checked.max(1) as f64
    }
}

/// `|a − n| / max(|a|, |n|, 1e-6)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn weights_for(model: &Model, batch: &TrainData) -> Result<BTreeMap<Task, Vec<f64>>> {
    let mut w = BTreeMap::new();
    for &task in &model.cfg.tasks {
        let counts = class_counts(batch.labels[&task].iter().flatten().copied(), task.n_classes());
        if counts.iter().any(|&c| c > 0) {
            w.insert(task, class_weights(&counts)?);
        }
    }
    Ok(w)
}

fn loss_value(model: &Model, batch: &TrainData, weights: &BTreeMap<Task, Vec<f64>>, cfg: &TrainConfig) -> Result<f64> {
    let mut g = Graph::new();
    let l = batch_loss(model, &mut g, batch, None, weights, cfg, Mode::Eval)?;
    Ok(g.value(l.total).item())
}

/// Compares the analytic gradient of the eval-mode objective against central
/// differences with step `h` for every scalar parameter.
pub fn gradient_check(model: &Model, batch: &TrainData, cfg: &TrainConfig, h: f64, tol: f64) -> Result<GradCheckReport> {
    let weights = weights_for(model, batch)?;
    let mut g = Graph::new();
    let l = batch_loss(model, &mut g, batch, None, &weights, cfg, Mode::Eval)?;
    let grads = g.backward(l.total);
    let mut work = model.clone();
    work.params.zero_grad();
    work.params.accumulate(&g, &grads);
    let analytic: Vec<Vec<f64>> = work.params.iter().map(|p| p.grad.clone()).collect();

    let mut report = GradCheckReport {
        n_checked: 0,
        n_within: 0,
        tolerance: tol,
        worst_rel: 0.0,
        worst_param: String::new(),
    };
    let n_params = work.params.len();
    for pi in 0..n_params {
        let id = crate::params::ParamId(pi);
        for j in 0..work.params.value(id).len() {
            let orig = work.params.value(id).data[j];
            work.params.value_mut(id).data[j] = orig + h;
            let fp = loss_value(&work, batch, &weights, cfg)?;
            work.params.value_mut(id).data[j] = orig - h;
            let fm = loss_value(&work, batch, &weights, cfg)?;
            work.params.value_mut(id).data[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let rel = relative_error(analytic[pi][j], numeric);
            report.n_checked += 1;
            if rel <= tol {
                report.n_within += 1;
            }
            if rel > report.worst_rel {
                report.worst_rel = rel;
                report.worst_param = format!("{}[{j}]", work.params.get(id).name);
            }
        }
    }
    Ok(report)
}
