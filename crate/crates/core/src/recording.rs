use ndarray::Array2;

use crate::error::{Error, Result};
use crate::labels::LabelRecord;

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub onset_sample: usize,
    pub label: LabelRecord,
}

/// Continuous multi-channel signal in microvolts, time-major (`time × channels`).
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    samples: Array2<f64>,
    fs: f64,
    channel_names: Vec<String>,
    events: Vec<Event>,
}

impl Recording {
    pub fn new(
        samples: Array2<f64>,
        fs: f64,
        channel_names: Vec<String>,
        events: Vec<Event>,
    ) -> Result<Self> {
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(Error::invalid(format!("sampling rate must be positive, got {fs}")));
        }
        let (n_time, n_chan) = samples.dim();
        if n_chan == 0 || n_time < 2 {
            return Err(Error::invalid(format!(
                "recording needs >= 1 channel and >= 2 samples, got {n_time}x{n_chan}"
            )));
        }
        if channel_names.len() != n_chan {
            return Err(Error::Shape(format!(
                "{} channel names for {n_chan} channels",
                channel_names.len()
            )));
        }
        if let Some(ev) = events.iter().find(|e| e.onset_sample >= n_time) {
            return Err(Error::invalid(format!(
                "event onset {} outside recording of {n_time} samples",
                ev.onset_sample
            )));
        }
        Ok(Recording {
            samples,
            fs,
            channel_names,
            events,
        })
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn n_times(&self) -> usize {
        self.samples.nrows()
    }

    pub fn n_channels(&self) -> usize {
        self.samples.ncols()
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channel_names.iter().position(|c| c.eq_ignore_ascii_case(name))
    }

    /// Same metadata, new signal of identical shape.
    pub fn with_samples(&self, samples: Array2<f64>) -> Result<Self> {
        if samples.dim() != self.samples.dim() {
            return Err(Error::Shape(format!(
                "replacement signal {:?} differs from {:?}",
                samples.dim(),
                self.samples.dim()
            )));
        }
        Ok(Recording {
            samples,
            ..self.clone_meta()
        })
    }

    /// Replaces signal, rate and events together (used by resampling).
    pub fn rebuild(&self, samples: Array2<f64>, fs: f64, events: Vec<Event>) -> Result<Self> {
        Recording::new(samples, fs, self.channel_names.clone(), events)
    }

    pub fn into_parts(self) -> (Array2<f64>, f64, Vec<String>, Vec<Event>) {
        (self.samples, self.fs, self.channel_names, self.events)
    }

    fn clone_meta(&self) -> Self {
        Recording {
            samples: Array2::zeros((0, 0)),
            fs: self.fs,
            channel_names: self.channel_names.clone(),
            events: self.events.clone(),
        }
    }
}
