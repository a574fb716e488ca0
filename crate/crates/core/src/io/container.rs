//! On-disk recording container.
//!
//! A container is a directory holding three files:
//!
//! * `manifest.json`: sampling rate, shape, channel names, layout, dtype, subject
//!   and the name of the events file.
//! * `signal.f32`: the samples as little-endian 32-bit floats, time-major
//!   (all channels of sample 0, then sample 1, ...), in microvolts.
//! * `events.tsv`: UTF-8, tab-separated, with the header row
//!   `onset_sample  subject  phoneme  tms  lexicality  word_phonemes`.
//!   `word_phonemes` is the word spelled with one symbol per phoneme (`bat`),
//!   `lexicality` is `real`, `pseudo` or `n/a`, and onsets are non-decreasing.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{parse_lexicality, LabelRecord, Phoneme, TmsCondition};
use crate::recording::{Event, Recording};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SIGNAL_FILE: &str = "signal.f32";
pub const EVENTS_FILE: &str = "events.tsv";
pub const LAYOUT: &str = "time-major";
pub const DTYPE: &str = "float32-le";
pub const EVENTS_HEADER: [&str; 6] = ["onset_sample", "subject", "phoneme", "tms", "lexicality", "word_phonemes"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerManifest {
    pub fs: f64,
    pub n_channels: usize,
    pub n_samples: usize,
    pub channel_names: Vec<String>,
    pub layout: String,
    pub dtype: String,
    pub events_file: String,
    pub subject: String,
}

impl ContainerManifest {
    pub fn validate(&self, path: &Path) -> Result<()> {
        let bad = |reason: String| Err(Error::format(path, reason));
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return bad(format!("fs must be positive, got {}", self.fs));
        }
        if self.channel_names.len() != self.n_channels {
            return bad(format!(
                "n_channels is {} but {} channel names are listed",
                self.n_channels,
                self.channel_names.len()
            ));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.channel_names.iter().find(|n| !seen.insert(n.as_str())) {
            return bad(format!("duplicate channel name {dup:?}"));
        }
        if self.layout != LAYOUT {
            return bad(format!("layout must be {LAYOUT:?}, got {:?}", self.layout));
        }
        if self.dtype != DTYPE {
            return bad(format!("dtype must be {DTYPE:?}, got {:?}", self.dtype));
        }
        if self.subject.is_empty() {
            return bad("subject is empty".into());
        }
        if self.events_file.is_empty() || self.events_file.contains(['/', '\\']) {
            return bad(format!("events_file must be a plain file name, got {:?}", self.events_file));
        }
        Ok(())
    }
}

pub fn read_manifest(dir: &Path) -> Result<ContainerManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: ContainerManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    manifest.validate(&path)?;
    Ok(manifest)
}

/// Loads and validates a container, returning the subject id and its recording.
pub fn load_container(dir: &Path) -> Result<(String, Recording)> {
    let manifest = read_manifest(dir)?;
    let sig_path = dir.join(SIGNAL_FILE);
    let bytes = fs::read(&sig_path).map_err(|e| Error::io(&sig_path, e))?;
    let expected = manifest
        .n_channels
        .checked_mul(manifest.n_samples)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::format(dir.join(MANIFEST_FILE), "declared shape overflows"))?;
    if bytes.len() != expected {
        return Err(Error::format(
            &sig_path,
            format!(
                "size mismatch: {} bytes on disk, manifest declares {} x {} x 4 = {expected}",
                bytes.len(),
                manifest.n_samples,
                manifest.n_channels
            ),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(
            &sig_path,
            format!("non-finite sample at time {} channel {}", i / manifest.n_channels, i % manifest.n_channels),
        ));
    }
    let samples = Array2::from_shape_vec((manifest.n_samples, manifest.n_channels), values)
        .map_err(|e| Error::Shape(e.to_string()))?;

    let ev_path = dir.join(&manifest.events_file);
    let text = fs::read_to_string(&ev_path).map_err(|e| Error::io(&ev_path, e))?;
    let events = parse_events(&text, &ev_path, &manifest)?;
    let rec = Recording::new(samples, manifest.fs, manifest.channel_names.clone(), events)
        .map_err(|e| Error::format(dir, e.to_string()))?;
    Ok((manifest.subject, rec))
}

fn parse_events(text: &str, path: &Path, manifest: &ContainerManifest) -> Result<Vec<Event>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end_matches('\r').split('\t').eq(EVENTS_HEADER) => {}
        _ => {
            return Err(Error::format(
                path,
                format!("line 1: header must be {:?}", EVENTS_HEADER.join("\t")),
            ))
        }
    }
    let mut events = Vec::new();
    let mut last_onset = 0usize;
    for (i, raw) in lines {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fail = |reason: String| Error::format(path, format!("line {line_no}: {reason}"));
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != EVENTS_HEADER.len() {
            return Err(fail(format!("expected {} columns, found {}", EVENTS_HEADER.len(), cols.len())));
        }
        let onset: usize = cols[0]
            .parse()
            .map_err(|_| fail(format!("onset_sample {:?} is not a non-negative integer", cols[0])))?;
        if onset >= manifest.n_samples {
            return Err(fail(format!("onset {onset} beyond the {} recorded samples", manifest.n_samples)));
        }
        if onset < last_onset {
            return Err(fail(format!("onset {onset} precedes the previous onset {last_onset}")));
        }
        last_onset = onset;
        if cols[1] != manifest.subject {
            return Err(fail(format!("subject {:?} differs from manifest subject {:?}", cols[1], manifest.subject)));
        }
        let phoneme: Phoneme = cols[2].parse().map_err(|e: Error| fail(e.to_string()))?;
        let tms: TmsCondition = cols[3].parse().map_err(|e: Error| fail(e.to_string()))?;
        let lexicality = parse_lexicality(cols[4]).map_err(|e| fail(e.to_string()))?;
        let word = cols[5]
            .chars()
            .map(|c| c.to_string().parse::<Phoneme>())
            .collect::<Result<Vec<_>>>()
            .map_err(|e| fail(e.to_string()))?;
        if word.first() != Some(&phoneme) {
            return Err(fail(format!(
                "phoneme {:?} is not the first phoneme of word {:?}",
                cols[2], cols[5]
            )));
        }
        let label = LabelRecord::new(cols[1], word, tms, lexicality).map_err(|e| fail(e.to_string()))?;
        events.push(Event { onset_sample: onset, label });
    }
    Ok(events)
}

pub fn format_events(subject: &str, events: &[Event]) -> String {
    let mut out = EVENTS_HEADER.join("\t");
    out.push('\n');
    for ev in events {
        let l = &ev.label;
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            ev.onset_sample,
            subject,
            l.phoneme,
            l.tms.as_str(),
            l.lexicality.map_or("n/a", |x| x.as_str()),
            l.word_string()
        ));
    }
    out
}

/// Writes `rec` as a container; samples are stored as f32.
pub fn save_container(dir: &Path, subject: &str, rec: &Recording) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if let Some(ev) = rec.events().iter().find(|e| e.label.subject != subject) {
        return Err(Error::invalid(format!(
            "event labelled with subject {:?} in container for {subject:?}",
            ev.label.subject
        )));
    }
    let manifest = ContainerManifest {
        fs: rec.fs(),
        n_channels: rec.n_channels(),
        n_samples: rec.n_times(),
        channel_names: rec.channel_names().to_vec(),
        layout: LAYOUT.into(),
        dtype: DTYPE.into(),
        events_file: EVENTS_FILE.into(),
        subject: subject.into(),
    };
    manifest.validate(&dir.join(MANIFEST_FILE))?;
    let mut bytes = Vec::with_capacity(rec.n_times() * rec.n_channels() * 4);
    for v in rec.samples().iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    write(&dir.join(SIGNAL_FILE), &bytes)?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&dir.join(MANIFEST_FILE), json.as_bytes())?;
    write(&dir.join(EVENTS_FILE), format_events(subject, rec.events()).as_bytes())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
