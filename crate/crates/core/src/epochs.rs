//! Stimulus-locked epoch containers and the per-item views used for decoding.

use ndarray::{s, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelRecord, Lexicality, Phoneme, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Erp,
    Dda,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Erp => "erp",
            FeatureKind::Dda => "dda",
        }
    }
}

/// Epoch window in milliseconds relative to stimulus onset.
pub const EPOCH_WINDOW_MS: (f64, f64) = (-200.0, 800.0);

/// Stimulus-locked windows (`epoch × time × feature`) with aligned labels.
///
/// `frame_times_ms` holds the onset-relative time of every frame; for DDA
/// epochs that is the window centre.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSet {
    pub data: Array3<f64>,
    pub labels: Vec<LabelRecord>,
    /// Index of the source event within its subject's recording.
    pub event_index: Vec<usize>,
    pub feature_kind: FeatureKind,
    pub window_ms: (f64, f64),
    pub frame_times_ms: Vec<f64>,
    pub n_channels: usize,
}

impl EpochSet {
    pub fn new(
        data: Array3<f64>,
        labels: Vec<LabelRecord>,
        event_index: Vec<usize>,
        feature_kind: FeatureKind,
        window_ms: (f64, f64),
        frame_times_ms: Vec<f64>,
        n_channels: usize,
    ) -> Result<Self> {
        let (n, t, f) = data.dim();
        if labels.len() != n || event_index.len() != n {
            return Err(Error::Shape(format!(
                "{n} epochs but {} labels / {} event indices",
                labels.len(),
                event_index.len()
            )));
        }
        if frame_times_ms.len() != t {
            return Err(Error::Shape(format!(
                "{t} frames but {} frame times",
                frame_times_ms.len()
            )));
        }
        let expected = match feature_kind {
            FeatureKind::Erp => n_channels,
            FeatureKind::Dda => 3 * n_channels,
        };
        if f != expected {
            return Err(Error::Shape(format!(
                "{} features for {n_channels} channels, expected {expected}",
                f
            )));
        }
        Ok(EpochSet {
            data,
            labels,
            event_index,
            feature_kind,
            window_ms,
            frame_times_ms,
            n_channels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_times(&self) -> usize {
        self.data.dim().1
    }

    pub fn n_features(&self) -> usize {
        self.data.dim().2
    }

    /// Keeps the epochs for which `keep` is true, in order.
    pub fn filter(&self, mut keep: impl FnMut(&LabelRecord) -> bool) -> EpochSet {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(&self.labels[i])).collect();
        self.select(&idx)
    }

    pub fn select(&self, idx: &[usize]) -> EpochSet {
        EpochSet {
            data: self.data.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i].clone()).collect(),
            event_index: idx.iter().map(|&i| self.event_index[i]).collect(),
            feature_kind: self.feature_kind,
            window_ms: self.window_ms,
            frame_times_ms: self.frame_times_ms.clone(),
            n_channels: self.n_channels,
        }
    }

    /// Concatenates epoch sets with identical layout (e.g. one per subject).
    pub fn concat(sets: &[EpochSet]) -> Result<EpochSet> {
        let first = sets
            .first()
            .ok_or_else(|| Error::invalid("cannot concatenate zero epoch sets"))?;
        for s in sets {
            if s.feature_kind != first.feature_kind
                || s.frame_times_ms != first.frame_times_ms
                || s.n_channels != first.n_channels
            {
                return Err(Error::Shape(
                    "epoch sets differ in kind, frame layout or channel count".into(),
                ));
            }
        }
        let views: Vec<_> = sets.iter().map(|s| s.data.view()).collect();
        let data = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(EpochSet {
            data,
            labels: sets.iter().flat_map(|s| s.labels.iter().cloned()).collect(),
            event_index: sets.iter().flat_map(|s| s.event_index.iter().copied()).collect(),
            feature_kind: first.feature_kind,
            window_ms: first.window_ms,
            frame_times_ms: first.frame_times_ms.clone(),
            n_channels: first.n_channels,
        })
    }

    pub fn subjects(&self) -> Vec<String> {
        let mut subs: Vec<String> = self.labels.iter().map(|l| l.subject.clone()).collect();
        subs.sort();
        subs.dedup();
        subs
    }

    /// Frame range `[start, end)` whose onset-relative time lies in `[lo_ms, hi_ms)`.
    pub fn frame_range(&self, lo_ms: f64, hi_ms: f64) -> (usize, usize) {
        let start = self
            .frame_times_ms
            .iter()
            .position(|&t| t >= lo_ms - 1e-9)
            .unwrap_or(self.n_times());
        let end = self
            .frame_times_ms
            .iter()
            .position(|&t| t >= hi_ms - 1e-9)
            .unwrap_or(self.n_times());
        (start, end.max(start))
    }
}

/// Granularity at which epochs become classifier inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleUnit {
    /// One item per epoch, full window, labelled by the trial.
    Trial,
    /// One item per phoneme position: the post-onset window is split into
    /// three equal thirds and position `p` of a word uses third `p`.
    Position,
}

/// Metadata of one classifier input.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    /// Index of the source epoch in the originating [`EpochSet`].
    pub epoch: usize,
    pub position: usize,
    pub phoneme: Phoneme,
    pub label: LabelRecord,
}

impl Item {
    pub fn subject(&self) -> &str {
        &self.label.subject
    }

    pub fn target(&self, task: Task) -> Option<usize> {
        match task {
            Task::Complexity => Task::Complexity.trial_target(&self.label),
            t => t.phoneme_target(self.phoneme),
        }
    }

    pub fn lexicality(&self) -> Option<Lexicality> {
        self.label.lexicality
    }
}

/// Classifier inputs (`item × time × feature`) with per-item metadata.
#[derive(Debug, Clone)]
pub struct ItemSet {
    pub data: Array3<f64>,
    pub items: Vec<Item>,
    pub feature_kind: FeatureKind,
    pub frame_times_ms: Vec<f64>,
    pub unit: SampleUnit,
}

impl ItemSet {
    pub fn from_epochs(epochs: &EpochSet, unit: SampleUnit) -> Result<ItemSet> {
        match unit {
            SampleUnit::Trial => Ok(ItemSet {
                data: epochs.data.clone(),
                items: epochs
                    .labels
                    .iter()
                    .enumerate()
                    .map(|(i, l)| Item {
                        epoch: i,
                        position: 0,
                        phoneme: l.phoneme,
                        label: l.clone(),
                    })
                    .collect(),
                feature_kind: epochs.feature_kind,
                frame_times_ms: epochs.frame_times_ms.clone(),
                unit,
            }),
            SampleUnit::Position => Self::positions(epochs),
        }
    }

    fn positions(epochs: &EpochSet) -> Result<ItemSet> {
        let (post_start, post_end) = epochs.frame_range(0.0, epochs.window_ms.1);
        let third = (post_end - post_start) / 3;
        if third == 0 {
            return Err(Error::invalid(
                "post-onset window too short to split into three positions",
            ));
        }
        let n_items: usize = epochs.labels.iter().map(|l| l.word_phonemes.len()).sum();
        let mut data = Array3::zeros((n_items, third, epochs.n_features()));
        let mut items = Vec::with_capacity(n_items);
        for (e, label) in epochs.labels.iter().enumerate() {
            for (p, &ph) in label.word_phonemes.iter().enumerate() {
                let start = post_start + p * third;
                data.slice_mut(s![items.len(), .., ..])
                    .assign(&epochs.data.slice(s![e, start..start + third, ..]));
                items.push(Item {
                    epoch: e,
                    position: p,
                    phoneme: ph,
                    label: label.clone(),
                });
            }
        }
        let frame_times_ms = epochs.frame_times_ms[post_start..post_start + third].to_vec();
        Ok(ItemSet {
            data,
            items,
            feature_kind: epochs.feature_kind,
            frame_times_ms,
            unit: SampleUnit::Position,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> ItemSet {
        ItemSet {
            data: self.data.select(Axis(0), idx),
            items: idx.iter().map(|&i| self.items[i].clone()).collect(),
            feature_kind: self.feature_kind,
            frame_times_ms: self.frame_times_ms.clone(),
            unit: self.unit,
        }
    }

    /// Items whose subject belongs to `subjects`.
    pub fn for_subjects(&self, subjects: &std::collections::BTreeSet<String>) -> ItemSet {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| subjects.contains(self.items[i].subject()))
            .collect();
        self.select(&idx)
    }

    /// Items that carry a defined target for `task`.
    pub fn with_target(&self, task: Task) -> ItemSet {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| self.items[i].target(task).is_some())
            .collect();
        self.select(&idx)
    }

    pub fn targets(&self, task: Task) -> Vec<Option<usize>> {
        self.items.iter().map(|it| it.target(task)).collect()
    }

    pub fn n_times(&self) -> usize {
        self.data.dim().1
    }

    pub fn n_features(&self) -> usize {
        self.data.dim().2
    }
}

/// Per-sample z-score over time for every feature channel; constant channels map to 0.
pub fn zscore_per_sample(data: &mut Array3<f64>) {
    for mut sample in data.outer_iter_mut() {
        for mut col in sample.columns_mut() {
            let n = col.len() as f64;
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            if sd < 1e-12 {
                col.fill(0.0);
            } else {
                col.mapv_inplace(|v| (v - mean) / sd);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::TmsCondition;
    use ndarray::Array3;

    fn label(word: &[Phoneme]) -> LabelRecord {
        LabelRecord::new("S01", word.to_vec(), TmsCondition::Null, None).unwrap()
    }

    fn erp_set() -> EpochSet {
        let times: Vec<f64> = (0..256).map(|i| (i as f64 - 51.0) * 1000.0 / 256.0).collect();
        let mut data = Array3::zeros((2, 256, 2));
        for ((e, t, c), v) in data.indexed_iter_mut() {
            *v = (e * 1000 + t * 10 + c) as f64;
        }
        EpochSet::new(
            data,
            vec![
                label(&[Phoneme::S]),
                label(&[Phoneme::B, Phoneme::A, Phoneme::T]),
            ],
            vec![0, 1],
            FeatureKind::Erp,
            EPOCH_WINDOW_MS,
            times,
            2,
        )
        .unwrap()
    }

    #[test]
    fn feature_dim_contract() {
        let data = Array3::zeros((1, 4, 6));
        let l = vec![label(&[Phoneme::A])];
        assert!(EpochSet::new(data.clone(), l.clone(), vec![0], FeatureKind::Dda, EPOCH_WINDOW_MS, vec![0.0; 4], 2).is_ok());
        assert!(EpochSet::new(data, l, vec![0], FeatureKind::Erp, EPOCH_WINDOW_MS, vec![0.0; 4], 2).is_err());
    }

    #[test]
    fn position_items_crop_thirds() {
        let set = erp_set();
        let items = ItemSet::from_epochs(&set, SampleUnit::Position).unwrap();
        // 205 post-onset frames -> thirds of 68
        assert_eq!(items.n_times(), 68);
        assert_eq!(items.len(), 4);
        assert_eq!(items.items[3].position, 2);
        assert_eq!(items.items[3].phoneme, Phoneme::T);
        // third position of epoch 1 starts at frame 51 + 136
        assert_eq!(items.data[[3, 0, 1]], set.data[[1, 51 + 136, 1]]);
        assert_eq!(items.frame_times_ms[0], 0.0);
        assert_eq!(items.items[0].target(Task::Manner), Some(0));
        assert_eq!(items.items[2].target(Task::Place), None);
        assert_eq!(items.items[2].target(Task::Complexity), Some(2));
    }

    #[test]
    fn zscore_constant_channels_zero() {
        let mut d = Array3::from_shape_fn((2, 10, 3), |(e, t, c)| {
            if c == 2 {
                5.0
            } else {
                (e + 1) as f64 * (t as f64).sin() + c as f64
            }
        });
        zscore_per_sample(&mut d);
        for s in d.outer_iter() {
            for (c, col) in s.columns().into_iter().enumerate() {
                let m = col.sum() / 10.0;
                let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 10.0;
                assert!(m.abs() < 1e-9);
                if c == 2 {
                    assert_eq!(v, 0.0);
                } else {
                    assert!((v - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn concat_and_filter() {
        let a = erp_set();
        let both = EpochSet::concat(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(both.len(), 4);
        let cvc = both.filter(|l| l.word_phonemes.len() == 3);
        assert_eq!(cvc.len(), 2);
        // frame 102 sits at 199.2 ms
        assert_eq!(a.frame_range(0.0, 200.0), (51, 103));
    }
}
