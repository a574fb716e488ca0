//! Augmentation, mixup, sampling, optimization schedule, early stopping and
//! the multi-task training loop.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use eegphon_core::{epochs::zscore_per_sample, Error, FeatureKind, ItemSet, Result, SampleUnit, Task};
use rand::distr::weighted::WeightedIndex;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::loss::{build_targets, check_finite, class_counts, class_weights, ctc_loss};
use crate::model::{Mode, Model};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// CTC blank symbol; phoneme `k` is emitted as `k + 1`.
pub const CTC_BLANK: usize = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    pub noise_sigma_rel: f64,
    pub chan_drop: (f64, f64),
    pub max_shift: usize,
    pub time_mask: (f64, f64),
    pub amp_scale: (f64, f64),
    /// Probability with which each step is applied to a sample.
    pub p_noise: f64,
    pub p_chan_drop: f64,
    pub p_shift: f64,
    pub p_time_mask: f64,
    pub p_amp: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            noise_sigma_rel: 0.02,
            chan_drop: (0.05, 0.10),
            max_shift: 5,
            time_mask: (0.05, 0.10),
            amp_scale: (0.85, 1.15),
            p_noise: 1.0,
            p_chan_drop: 1.0,
            p_shift: 1.0,
            p_time_mask: 1.0,
            p_amp: 1.0,
        }
    }
}

impl AugmentSpec {
    /// Default ranges with the time shift of the feature path (±5 ERP, ±20 DDA).
    pub fn for_feature(kind: FeatureKind) -> AugmentSpec {
        AugmentSpec {
            max_shift: if kind == FeatureKind::Dda { 20 } else { 5 },
            ..AugmentSpec::default()
        }
    }

    pub fn off() -> AugmentSpec {
        AugmentSpec {
            p_noise: 0.0,
            p_chan_drop: 0.0,
            p_shift: 0.0,
            p_time_mask: 0.0,
            p_amp: 0.0,
            ..AugmentSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range = |(lo, hi): (f64, f64), name: &str, max: f64| {
            if lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi && hi <= max {
                Ok(())
            } else {
                Err(Error::invalid(format!("augment {name} range ({lo}, {hi}) is invalid")))
            }
        };
        range(self.chan_drop, "chan_drop", 1.0)?;
        range(self.time_mask, "time_mask", 1.0)?;
        range(self.amp_scale, "amp_scale", f64::MAX)?;
        for (p, name) in [
            (self.p_noise, "p_noise"),
            (self.p_chan_drop, "p_chan_drop"),
            (self.p_shift, "p_shift"),
            (self.p_time_mask, "p_time_mask"),
            (self.p_amp, "p_amp"),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("augment {name} = {p} is not a probability")));
            }
        }
        if !(self.noise_sigma_rel >= 0.0) {
            return Err(Error::invalid("augment noise_sigma_rel must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_epochs: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub label_smoothing: f64,
    pub mixup_alpha: f64,
    pub mixup_fraction: f64,
    pub ctc_weight: f64,
    pub class_weighting: bool,
    pub balanced_sampler: bool,
    pub augment: AugmentSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 5e-4,
            lr_min: 1e-6,
            warmup_epochs: 10,
            max_epochs: 150,
            patience: 30,
            batch: 64,
            weight_decay: 1e-4,
            betas: (0.9, 0.98),
            adam_eps: 1e-8,
            clip_norm: 1.0,
            label_smoothing: 0.1,
            mixup_alpha: 0.1,
            mixup_fraction: 0.9,
            ctc_weight: 0.1,
            class_weighting: true,
            balanced_sampler: true,
            augment: AugmentSpec::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.warmup_epochs >= self.max_epochs {
            return Err(Error::invalid(format!(
                "warmup_epochs {} must be below max_epochs {}",
                self.warmup_epochs, self.max_epochs
            )));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch must be positive"));
        }
        let rates = [
            ("lr_max", self.lr_max),
            ("lr_min", self.lr_min),
            ("weight_decay", self.weight_decay),
            ("clip_norm", self.clip_norm),
            ("mixup_alpha", self.mixup_alpha),
            ("ctc_weight", self.ctc_weight),
        ];
        for (name, v) in rates {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} = {v} must be a finite non-negative number")));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::invalid("label_smoothing must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.mixup_fraction) {
            return Err(Error::invalid("mixup_fraction must lie in [0, 1]"));
        }
        for b in [self.betas.0, self.betas.1] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid("Adam betas must lie in [0, 1)"));
            }
        }
        self.augment.validate()
    }

    /// Number of leading epochs that use mixup.
    pub fn mixup_epochs(&self) -> usize {
        if self.mixup_alpha <= 0.0 {
            0
        } else {
            (self.mixup_fraction * self.max_epochs as f64 + 1e-9).floor() as usize
        }
    }
}

/// Linear warmup to `lr_max`, then cosine annealing to `lr_min` at `max_epochs`.
/// `t` is measured in (possibly fractional) epochs.
pub fn lr_schedule(t: f64, cfg: &TrainConfig) -> f64 {
    let tw = cfg.warmup_epochs as f64;
    let tt = cfg.max_epochs as f64;
    if t < tw {
        cfg.lr_max * t / tw
    } else {
        let frac = ((t - tw) / (tt - tw)).min(1.0);
        cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// Adds N(0, σ²) noise with σ = `sigma_rel` × the sample's standard deviation.
pub fn add_noise<R: Rng>(x: &mut [f64], sigma_rel: f64, rng: &mut R) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sigma = sigma_rel * sd;
    if sigma > 0.0 {
        let dist = Normal::new(0.0, sigma).expect("finite sigma");
        x.iter_mut().for_each(|v| *v += dist.sample(rng));
    }
}

/// Circular shift along time of a `t × f` sample: `out[i] = x[(i − s) mod t]`.
pub fn roll_time(x: &mut [f64], t: usize, f: usize, s: isize) {
    let k = s.rem_euclid(t as isize) as usize;
    x.rotate_right(k * f);
}

/// Applies noise, channel zeroing, circular shift, a time mask and amplitude
/// scaling, in that order, to one `t × f` sample.
pub fn augment<R: Rng>(x: &mut [f64], t: usize, f: usize, spec: &AugmentSpec, rng: &mut R) {
    debug_assert_eq!(x.len(), t * f);
    if rng.random::<f64>() < spec.p_noise {
        add_noise(x, spec.noise_sigma_rel, rng);
    }
    if rng.random::<f64>() < spec.p_chan_drop {
        let frac = rng.random_range(spec.chan_drop.0..=spec.chan_drop.1);
        let n = ((frac * f as f64).round() as usize).min(f);
        for c in index::sample(rng, f, n) {
            for i in 0..t {
                x[i * f + c] = 0.0;
            }
        }
    }
    if rng.random::<f64>() < spec.p_shift && spec.max_shift > 0 {
        let m = spec.max_shift as i64;
        roll_time(x, t, f, rng.random_range(-m..=m) as isize);
    }
    if rng.random::<f64>() < spec.p_time_mask {
        let frac = rng.random_range(spec.time_mask.0..=spec.time_mask.1);
        let len = ((frac * t as f64).round() as usize).min(t);
        if len > 0 {
            let start = rng.random_range(0..=t - len);
            x[start * f..(start + len) * f].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    if rng.random::<f64>() < spec.p_amp {
        let a = rng.random_range(spec.amp_scale.0..=spec.amp_scale.1);
        x.iter_mut().for_each(|v| *v *= a);
    }
}

/// One λ ~ Beta(α, α) per batch and a shuffled partner for every sample;
/// `x̃_i = λ·x_i + (1−λ)·x_π(i)`. Batches of one pass through unchanged.
pub fn mixup_batch<R: Rng>(x: &mut Tensor, alpha: f64, rng: &mut R) -> Option<(Vec<usize>, f64)> {
    let b = x.shape[0];
    if b < 2 || alpha <= 0.0 {
        return None;
    }
    let lam = Beta::new(alpha, alpha).expect("positive alpha").sample(rng);
    let mut perm: Vec<usize> = (0..b).collect();
    perm.shuffle(rng);
    mix_with(x, &perm, lam);
    Some((perm, lam))
}

pub fn mix_with(x: &mut Tensor, perm: &[usize], lam: f64) {
    let per = x.len() / x.shape[0];
    let orig = x.data.clone();
    for (i, &j) in perm.iter().enumerate() {
        for k in 0..per {
            x.data[i * per + k] = lam * orig[i * per + k] + (1.0 - lam) * orig[j * per + k];
        }
    }
}

/// Draws sample indices with replacement, each with probability ∝ 1/count of its class.
#[derive(Debug, Clone)]
pub struct WeightedSampler {
    dist: WeightedIndex<f64>,
}

impl WeightedSampler {
    /// `required` lists classes that must occur in `labels`.
    pub fn new(labels: &[usize], required: &[usize]) -> Result<WeightedSampler> {
        if labels.is_empty() {
            return Err(Error::invalid("sampler needs at least one label"));
        }
        let n_classes = labels.iter().chain(required).max().map_or(0, |m| m + 1);
        let counts = class_counts(labels.iter().copied(), n_classes);
        if let Some(&c) = required.iter().find(|&&c| counts[c] == 0) {
            return Err(Error::invalid(format!("class {c} has no samples")));
        }
        let w: Vec<f64> = labels.iter().map(|&y| 1.0 / counts[y] as f64).collect();
        Ok(WeightedSampler {
            dist: WeightedIndex::new(w).map_err(|e| Error::invalid(e.to_string()))?,
        })
    }

    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        (0..n).map(|_| self.dist.sample(rng)).collect()
    }
}

/// AdamW with decoupled weight decay on parameters flagged for decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamStore, betas: (f64, f64), eps: f64, weight_decay: f64) -> AdamW {
        AdamW {
            betas,
            eps,
            weight_decay,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, lr: f64) {
        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.decay { 1.0 - lr * self.weight_decay } else { 1.0 };
            for i in 0..p.grad.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let w = &mut p.value.data[i];
                *w *= decay;
                *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Stops once `patience` consecutive epochs fail to improve on the best metric.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    pub since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> EarlyStopping {
        EarlyStopping {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: None,
            since_best: 0,
        }
    }

    /// Records `metric` for `epoch`; true when it is a new best.
    pub fn update(&mut self, epoch: usize, metric: f64) -> bool {
        if metric > self.best {
            self.best = metric;
            self.best_epoch = Some(epoch);
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }
}

/// Z-scored inputs with per-task labels and CTC targets.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub x: Tensor,
    pub labels: BTreeMap<Task, Vec<Option<usize>>>,
    pub ctc: Vec<Vec<usize>>,
}

impl TrainData {
    pub fn from_items(items: &ItemSet, tasks: &[Task]) -> TrainData {
        let mut data = items.data.clone();
        zscore_per_sample(&mut data);
        let labels = tasks.iter().map(|&t| (t, items.targets(t))).collect();
        let ctc = items
            .items
            .iter()
            .map(|it| match items.unit {
                SampleUnit::Position => vec![it.phoneme.index() + 1],
                SampleUnit::Trial => it.label.word_phonemes.iter().map(|p| p.index() + 1).collect(),
            })
            .collect();
        TrainData {
            x: Tensor::from_array3(&data),
            labels,
            ctc,
        }
    }

    pub fn len(&self) -> usize {
        self.x.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, idx: &[usize]) -> TrainData {
        let per = self.x.len() / self.len().max(1);
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.x.data[i * per..][..per]);
        }
        TrainData {
            x: Tensor::new(&[idx.len(), self.x.shape[1], self.x.shape[2]], data),
            labels: self.labels.iter().map(|(&t, l)| (t, idx.iter().map(|&i| l[i]).collect())).collect(),
            ctc: idx.iter().map(|&i| self.ctc[i].clone()).collect(),
        }
    }
}

/// The task that drives sampling and early stopping.
pub fn primary_task(tasks: &[Task]) -> Task {
    if tasks.contains(&Task::Phoneme) {
        Task::Phoneme
    } else {
        tasks[0]
    }
}

pub struct BatchLoss {
    pub total: Var,
    pub per_task: BTreeMap<Task, f64>,
    pub ctc: Option<f64>,
    pub bn_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Multi-task objective: mean over heads of label-smoothed weighted CE
/// (a head without labels in the batch contributes 0), plus the weighted CTC
/// loss when the model has a CTC head.
pub fn batch_loss(
    model: &Model,
    g: &mut Graph,
    batch: &TrainData,
    mix: Option<(&[usize], f64)>,
    weights: &BTreeMap<Task, Vec<f64>>,
    cfg: &TrainConfig,
    mode: Mode,
) -> Result<BatchLoss> {
    let out = model.forward(g, &batch.x, mode)?;
    let mut terms = Vec::new();
    let mut per_task = BTreeMap::new();
    for (&task, &logits) in &out.logits {
        check_finite(g.value(logits))?;
        let labels = batch
            .labels
            .get(&task)
            .ok_or_else(|| Error::invalid(format!("no labels for the {task} head")))?;
        let w = weights.get(&task).map(|w| w.as_slice());
        let (t, rows) = build_targets(labels, mix, task.n_classes(), cfg.label_smoothing, w);
        if rows > 0 {
            let l = g.soft_cross_entropy(logits, t, rows as f64);
            per_task.insert(task, g.value(l).item());
            terms.push(l);
        } else {
            per_task.insert(task, 0.0);
        }
    }
    let n_heads = out.logits.len() as f64;
    let mut weights_sum = vec![1.0 / n_heads; terms.len()];
    let mut ctc_value = None;
    if let Some(frames) = out.ctc {
        let mut parts = Vec::new();
        match mix {
            Some((perm, lam)) => {
                let partner: Vec<Vec<usize>> = perm.iter().map(|&j| batch.ctc[j].clone()).collect();
                if let Some(a) = ctc_loss(g, frames, &batch.ctc, CTC_BLANK)? {
                    parts.push((a, lam));
                }
                if let Some(b) = ctc_loss(g, frames, &partner, CTC_BLANK)? {
                    parts.push((b, 1.0 - lam));
                }
            }
            None => {
                if let Some(a) = ctc_loss(g, frames, &batch.ctc, CTC_BLANK)? {
                    parts.push((a, 1.0));
                }
            }
        }
        let mut v = 0.0;
        for (var, w) in parts {
            v += w * g.value(var).item();
            terms.push(var);
            weights_sum.push(cfg.ctc_weight * w);
        }
        ctc_value = Some(v);
    }
    let total = if terms.is_empty() {
        g.input(Tensor::scalar(0.0))
    } else {
        g.weighted_sum(&terms, &weights_sum)
    };
    Ok(BatchLoss {
        total,
        per_task,
        ctc: ctc_value,
        bn_stats: out.bn_stats,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: BTreeMap<Task, f64>,
    pub ctc_loss: Option<f64>,
    pub total_loss: f64,
    pub grad_norm: f64,
    pub val_accuracy: BTreeMap<Task, f64>,
}

pub struct TrainOutcome {
    /// Best-validation model, or the final one when no validation set is given.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
}

/// Accuracy of every head on the labelled items of `data`.
pub fn evaluate(model: &Model, data: &TrainData, batch: usize) -> Result<BTreeMap<Task, f64>> {
    let mut out = BTreeMap::new();
    for &task in &model.cfg.tasks {
        let logits = model.predict(&data.x, task, batch)?;
        let labels = &data.labels[&task];
        let (mut hit, mut n) = (0usize, 0usize);
        for (row, y) in logits.outer_iter().zip(labels) {
            if let Some(y) = y {
                n += 1;
                hit += usize::from(eegphon_core::stats::metrics::argmax(row) == *y);
            }
        }
        if n > 0 {
            out.insert(task, hit as f64 / n as f64);
        }
    }
    Ok(out)
}

/// Trains `model` in place of a copy and returns the selected weights with
/// the per-epoch history.
pub fn train(model: &Model, train: &TrainData, val: Option<&TrainData>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    if train.x.shape[2] != model.n_features {
        return Err(Error::Shape(format!(
            "training data has {} features, model expects {}",
            train.x.shape[2], model.n_features
        )));
    }
    let mut model = model.clone();
    let tasks = model.cfg.tasks.clone();
    let primary = primary_task(&tasks);
    let mut weights = BTreeMap::new();
    for &task in &tasks {
        let labels = train.labels.get(&task).ok_or_else(|| Error::invalid(format!("no labels for the {task} head")))?;
        if cfg.class_weighting {
            let counts = class_counts(labels.iter().flatten().copied(), task.n_classes());
            if counts.iter().any(|&c| c > 0) {
                weights.insert(task, class_weights(&counts)?);
            }
        }
    }
    let primary_labels: Vec<Option<usize>> = train.labels[&primary].clone();
    let labelled: Vec<usize> = (0..train.len()).filter(|&i| primary_labels[i].is_some()).collect();
    if labelled.is_empty() {
        return Err(Error::invalid(format!("no training item has a {primary} label")));
    }
    let sampler = if cfg.balanced_sampler {
        let ys: Vec<usize> = labelled.iter().map(|&i| primary_labels[i].unwrap()).collect();
        Some(WeightedSampler::new(&ys, &[])?)
    } else {
        None
    };

    let mut rng = eegphon_core::rng::stream(cfg.seed, &[0x7a17]);
    let mut opt = AdamW::new(&model.params, cfg.betas, cfg.adam_eps, cfg.weight_decay);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best: Option<Model> = None;
    let mut history = Vec::new();
    let (t, f) = (train.x.shape[1], train.x.shape[2]);
    let n = labelled.len();
    let n_batches = n.div_ceil(cfg.batch);
    let mixup_epochs = cfg.mixup_epochs();

    for epoch in 0..cfg.max_epochs {
        let order: Vec<usize> = match &sampler {
            Some(s) => s.sample(n, &mut rng).into_iter().map(|k| labelled[k]).collect(),
            None => {
                let mut o = labelled.clone();
                o.shuffle(&mut rng);
                o
            }
        };
        let mut sums: BTreeMap<Task, f64> = BTreeMap::new();
        let (mut total_sum, mut ctc_sum, mut norm_sum) = (0.0, 0.0, 0.0);
        let mut lr = 0.0;
        for (b, idx) in order.chunks(cfg.batch).enumerate() {
            let mut batch = train.batch(idx);
            for sample in batch.x.data.chunks_mut(t * f) {
                augment(sample, t, f, &cfg.augment, &mut rng);
            }
            let mix = if epoch < mixup_epochs {
                mixup_batch(&mut batch.x, cfg.mixup_alpha, &mut rng)
            } else {
                None
            };
            let mut g = Graph::new();
            let loss = batch_loss(
                &model,
                &mut g,
                &batch,
                mix.as_ref().map(|(p, l)| (p.as_slice(), *l)),
                &weights,
                cfg,
                Mode::Train(&mut rng),
            )?;
            let value = g.value(loss.total).item();
            if !value.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss at epoch {epoch}, batch {b}")));
            }
            let grads = g.backward(loss.total);
            model.params.zero_grad();
            model.params.accumulate(&g, &grads);
            norm_sum += model.params.clip_grad_norm(cfg.clip_norm);
            lr = lr_schedule(epoch as f64 + (b + 1) as f64 / n_batches as f64, cfg);
            opt.step(&mut model.params, lr);
            model.update_bn(&loss.bn_stats);
            total_sum += value;
            ctc_sum += loss.ctc.unwrap_or(0.0);
            for (task, v) in loss.per_task {
                *sums.entry(task).or_default() += v;
            }
        }
        let nb = n_batches as f64;
        let val_accuracy = match val {
            Some(v) if !v.is_empty() => evaluate(&model, v, cfg.batch)?,
            _ => BTreeMap::new(),
        };
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: sums.into_iter().map(|(k, v)| (k, v / nb)).collect(),
            ctc_loss: model.cfg.ctc_enabled.then_some(ctc_sum / nb),
            total_loss: total_sum / nb,
            grad_norm: norm_sum / nb,
            val_accuracy,
        };
        log::debug!("epoch {epoch}: loss {:.4}, lr {:.2e}", rec.total_loss, rec.lr);
        let metric = rec.val_accuracy.get(&primary).copied();
        history.push(rec);
        if let Some(m) = metric {
            if stopper.update(epoch, m) {
                best = Some(model.clone());
            }
            if stopper.should_stop() {
                break;
            }
        }
    }
    let epochs_run = history.len();
    Ok(TrainOutcome {
        model: best.unwrap_or(model),
        history,
        best_epoch: stopper.best_epoch,
        epochs_run,
    })
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let io = |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for rec in history {
        let line = serde_json::to_string(rec).map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(f, "{line}").map_err(io)?;
    }
    f.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_points() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0.0, &cfg), 0.0);
        assert!((lr_schedule(10.0, &cfg) - 5e-4).abs() < 1e-18);
        assert!((lr_schedule(150.0, &cfg) - 1e-6).abs() < 1e-18);
        let eps = 1e-12;
        assert!((lr_schedule(10.0 - eps, &cfg) - lr_schedule(10.0, &cfg)).abs() < 1e-12);
        assert!((lr_schedule(5.0, &cfg) - 2.5e-4).abs() < 1e-18);
        assert_eq!(cfg.mixup_epochs(), 135);
    }

    #[test]
    fn augment_off_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut y = x.clone();
        augment(&mut y, 20, 10, &AugmentSpec::off(), &mut rng);
        assert_eq!(x, y);
    }

    #[test]
    fn shift_is_roll() {
        let (t, f) = (12, 3);
        let x: Vec<f64> = (0..t * f).map(|v| v as f64).collect();
        let mut y = x.clone();
        roll_time(&mut y, t, f, 5);
        for i in 0..t {
            for c in 0..f {
                assert_eq!(y[i * f + c], x[((i + t - 5) % t) * f + c]);
            }
        }
        let spec = AugmentSpec {
            p_shift: 1.0,
            ..AugmentSpec::off()
        };
        let mut z = x.clone();
        augment(&mut z, t, f, &spec, &mut ChaCha8Rng::seed_from_u64(3));
        assert!((0..=5).any(|s| {
            let mut r = x.clone();
            roll_time(&mut r, t, f, s);
            let mut l = x.clone();
            roll_time(&mut l, t, f, -s);
            r == z || l == z
        }));
    }

    #[test]
    fn noise_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        // unit-std calibration signal
        let x: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let mut y = x.clone();
        add_noise(&mut y, 0.02, &mut rng);
        let d: Vec<f64> = y.iter().zip(&x).map(|(a, b)| a - b).collect();
        let m = d.iter().sum::<f64>() / n as f64;
        let sd = (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!((sd - 0.02).abs() < 0.002, "{sd}");
        let mut zero = vec![0.0; 100];
        add_noise(&mut zero, 0.02, &mut rng);
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_drop_and_mask_ranges() {
        let (t, f) = (100, 40);
        let spec = AugmentSpec {
            p_chan_drop: 1.0,
            ..AugmentSpec::off()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let mut x = vec![1.0; t * f];
            augment(&mut x, t, f, &spec, &mut rng);
            let dropped = (0..f).filter(|&c| (0..t).all(|i| x[i * f + c] == 0.0)).count();
            assert!((2..=4).contains(&dropped), "{dropped}");
        }
        let spec = AugmentSpec {
            p_time_mask: 1.0,
            ..AugmentSpec::off()
        };
        for _ in 0..20 {
            let mut x = vec![1.0; t * f];
            augment(&mut x, t, f, &spec, &mut rng);
            let masked: Vec<usize> = (0..t).filter(|&i| x[i * f] == 0.0).collect();
            assert!((5..=10).contains(&masked.len()));
            assert_eq!(masked.last().unwrap() - masked[0] + 1, masked.len());
        }
    }

    #[test]
    fn mixup_endpoints() {
        let mut x = Tensor::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let orig = x.clone();
        mix_with(&mut x, &[1, 0], 1.0);
        assert_eq!(x, orig);
        let mut same = Tensor::new(&[2, 1, 1], vec![5.0, 5.0]);
        mix_with(&mut same, &[1, 0], 0.5);
        assert_eq!(same.data, vec![5.0, 5.0]);
        let mut one = Tensor::new(&[1, 2, 1], vec![1.0, 2.0]);
        assert!(mixup_batch(&mut one, 0.1, &mut ChaCha8Rng::seed_from_u64(0)).is_none());
        assert_eq!(one.data, vec![1.0, 2.0]);
        let mut big = Tensor::new(&[8, 1, 1], (0..8).map(f64::from).collect());
        let (perm, lam) = mixup_batch(&mut big, 0.1, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!((0.0..=1.0).contains(&lam));
        for i in 0..8 {
            assert!((big.data[i] - (lam * i as f64 + (1.0 - lam) * perm[i] as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn sampler_balances() {
        let labels: Vec<usize> = (0..100).map(|i| usize::from(i >= 90)).collect();
        let s = WeightedSampler::new(&labels, &[0, 1]).unwrap();
        let draws = s.sample(100_000, &mut ChaCha8Rng::seed_from_u64(1));
        let frac = draws.iter().filter(|&&i| labels[i] == 1).count() as f64 / 1e5;
        assert!((frac - 0.5).abs() < 0.01, "{frac}");
        assert_eq!(draws, s.sample(100_000, &mut ChaCha8Rng::seed_from_u64(1)));
        let single = WeightedSampler::new(&[2, 2, 2], &[]).unwrap();
        assert!(single.sample(50, &mut ChaCha8Rng::seed_from_u64(0)).iter().all(|&i| i < 3));
        assert!(WeightedSampler::new(&[0, 0], &[0, 1]).is_err());
    }

    #[test]
    fn adamw_matches_reference() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::new(&[3], vec![0.5, -1.0, 2.0]), true);
        let b = store.add("b", Tensor::new(&[2], vec![0.1, -0.2]), false);
        let mut opt = AdamW::new(&store, (0.9, 0.98), 1e-8, 0.1);
        let grads = [
            ([0.3, -0.7, 1.1], [0.05, -2.0]),
            ([-0.2, 0.4, 0.9], [0.5, 0.0]),
            ([1.5, -0.1, 0.0], [-0.3, 0.8]),
        ];
        for (gp, gb) in grads {
            store.iter_mut().next().unwrap().grad = gp.to_vec();
            store.iter_mut().nth(1).unwrap().grad = gb.to_vec();
            opt.step(&mut store, 1e-2);
        }
        // torch.optim.AdamW, float64, same settings
        let want_p = [0.48065848620408147, -0.9824631058715428, 1.96643195203507];
        let want_b = [0.07989163682624605, -0.18081607064482547];
        for (a, w) in store.value(p).data.iter().zip(want_p) {
            assert!((a - w).abs() < 1e-12);
        }
        for (a, w) in store.value(b).data.iter().zip(want_b) {
            assert!((a - w).abs() < 1e-12);
        }
    }

    #[test]
    fn early_stop_after_patience() {
        let mut es = EarlyStopping::new(30);
        let mut last = 0;
        for epoch in 0..150 {
            es.update(epoch, 1.0 - epoch as f64 * 0.01);
            last = epoch;
            if es.should_stop() {
                break;
            }
        }
        assert_eq!(es.best_epoch, Some(0));
        assert_eq!(last, 30);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            warmup_epochs: 150,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            augment: AugmentSpec {
                chan_drop: (0.2, 0.1),
                ..AugmentSpec::default()
            },
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
