//! Seeded synthetic EEG: pink background noise plus class-specific evoked
//! templates at stimulus onsets.
//!
//! Each phoneme owns a Gaussian-bump template with its own latency (inside the
//! first third of the post-onset window) and spatial pattern. Multi-phoneme
//! words place the template of position `p` at `latency + p·800/3` ms, so each
//! position's response falls in its own third of the epoch.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::container::save_container;
use crate::labels::{LabelRecord, Lexicality, Phoneme, TmsCondition};
use crate::recording::{Event, Recording};
use crate::rng::stream;

/// Channel names in generation order; frontal sites come first so small
/// montages still carry the EOG proxies.
pub const CHANNEL_NAMES: [&str; 64] = [
    "Fp1", "Fp2", "AF7", "AF8", "Fz", "Cz", "Pz", "Oz", "F3", "F4", "C3", "C4", "P3", "P4", "O1", "O2",
    "AF3", "AF4", "AFz", "Fpz", "F1", "F2", "F5", "F6", "F7", "F8", "FT7", "FT8", "FC5", "FC6", "FC3",
    "FC4", "FC1", "FC2", "FCz", "C1", "C2", "C5", "C6", "T7", "T8", "TP7", "TP8", "CP5", "CP6", "CP3",
    "CP4", "CP1", "CP2", "CPz", "P1", "P2", "P5", "P6", "P7", "P8", "P9", "P10", "PO7", "PO8", "PO3",
    "PO4", "POz", "Iz",
];

/// Real CVC words over the stimulus alphabet.
pub const REAL_CVC: [&str; 36] = [
    "bad", "bat", "bed", "bet", "bid", "bit", "bop", "bud", "bus", "but", "dab", "dad", "dip", "dot",
    "dub", "pad", "pat", "pet", "pit", "pod", "pot", "pub", "pup", "sad", "sat", "set", "sip", "sit",
    "sob", "sub", "tab", "tap", "tip", "top", "tub", "zip",
];

const STREAM_TEMPLATES: u64 = 0x7E4D;
const STREAM_SUBJECT: u64 = 0x5B1E;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub n_channels: usize,
    pub fs: f64,
    /// Single-phoneme trials per phoneme class and subject.
    pub trials_per_class: usize,
    pub diphones_per_subject: usize,
    pub cvc_real_per_subject: usize,
    pub cvc_pseudo_per_subject: usize,
    pub isi_ms: f64,
    pub isi_jitter_ms: f64,
    /// Standard deviation of the background noise, µV.
    pub noise_uv: f64,
    /// Spectral exponent of the 1/f^β background.
    pub noise_exponent: f64,
    /// Peak template amplitude, µV.
    pub template_amplitude_uv: f64,
    pub template_width_ms: f64,
    /// Template latencies are spread evenly over this range, ms after onset.
    pub template_latency_ms: (f64, f64),
    pub subject_gain: (f64, f64),
    pub blink_rate_hz: f64,
    pub blink_amplitude_uv: f64,
    /// Consecutive trials sharing one TMS condition.
    pub tms_block_len: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_subjects: 16,
            n_channels: 16,
            fs: 2048.0,
            trials_per_class: 12,
            diphones_per_subject: 0,
            cvc_real_per_subject: 12,
            cvc_pseudo_per_subject: 12,
            isi_ms: 1500.0,
            isi_jitter_ms: 200.0,
            noise_uv: 10.0,
            noise_exponent: 1.0,
            template_amplitude_uv: 10.0,
            template_width_ms: 30.0,
            template_latency_ms: (80.0, 200.0),
            subject_gain: (0.8, 1.2),
            blink_rate_hz: 0.0,
            blink_amplitude_uv: 100.0,
            tms_block_len: 12,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, msg: &str| Err(Error::invalid(format!("synth spec field `{name}`: {msg}")));
        if self.n_subjects == 0 || self.n_subjects > 99 {
            return field("n_subjects", "must be in 1..=99");
        }
        if self.n_channels == 0 || self.n_channels > CHANNEL_NAMES.len() {
            return field("n_channels", "must be in 1..=64");
        }
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return field("fs", "must be positive");
        }
        if self.trials_per_class + self.diphones_per_subject + self.cvc_real_per_subject + self.cvc_pseudo_per_subject == 0 {
            return field("trials_per_class", "no trials requested");
        }
        if !(self.isi_ms >= 1000.0) {
            return field("isi_ms", "must be at least 1000 so epochs do not overlap");
        }
        if !(self.isi_jitter_ms >= 0.0) {
            return field("isi_jitter_ms", "must be non-negative");
        }
        if !(self.noise_uv >= 0.0) {
            return field("noise_uv", "must be non-negative");
        }
        if !self.noise_exponent.is_finite() {
            return field("noise_exponent", "must be finite");
        }
        if !(self.template_amplitude_uv >= 0.0) {
            return field("template_amplitude_uv", "must be non-negative");
        }
        if !(self.template_width_ms > 0.0) {
            return field("template_width_ms", "must be positive");
        }
        let (l0, l1) = self.template_latency_ms;
        if !(0.0 <= l0 && l0 < l1 && l1 < 800.0 / 3.0) {
            return field("template_latency_ms", "must satisfy 0 <= lo < hi < 266.7");
        }
        let (g0, g1) = self.subject_gain;
        if !(0.0 < g0 && g0 <= g1) {
            return field("subject_gain", "must satisfy 0 < lo <= hi");
        }
        if !(self.blink_rate_hz >= 0.0) || !(self.blink_amplitude_uv >= 0.0) {
            return field("blink_rate_hz", "blink rate and amplitude must be non-negative");
        }
        if self.tms_block_len == 0 {
            return field("tms_block_len", "must be at least 1");
        }
        Ok(())
    }

    pub fn subject_name(idx: usize) -> String {
        format!("S{:02}", idx + 1)
    }

    pub fn channel_names(&self) -> Vec<String> {
        CHANNEL_NAMES[..self.n_channels].iter().map(|s| s.to_string()).collect()
    }
}

/// Per-class evoked template shared by all subjects.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub latency_ms: f64,
    pub width_ms: f64,
    pub amplitude_uv: f64,
    pub channel_weights: Vec<f64>,
}

pub fn templates(spec: &SynthSpec) -> Vec<Template> {
    let (l0, l1) = spec.template_latency_ms;
    let n = Phoneme::ALL.len();
    (0..n)
        .map(|c| {
            let mut rng = stream(spec.seed, &[STREAM_TEMPLATES, c as u64]);
            let mut w: Vec<f64> = (0..spec.n_channels).map(|_| StandardNormal.sample(&mut rng)).collect();
            let peak = w.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
            w.iter_mut().for_each(|v| *v /= peak);
            Template {
                latency_ms: l0 + (l1 - l0) * c as f64 / (n - 1) as f64,
                width_ms: spec.template_width_ms,
                amplitude_uv: spec.template_amplitude_uv,
                channel_weights: w,
            }
        })
        .collect()
}

/// Unit-variance noise with power spectrum ∝ 1/f^exponent, shaped in the frequency domain.
pub fn pink_noise(n: usize, exponent: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if n < 2 {
        return vec![0.0; n];
    }
    let mut spec = vec![Complex::new(0.0, 0.0); n];
    for k in 1..=n / 2 {
        let amp = (k as f64).powf(-exponent / 2.0);
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        spec[k] = Complex::new(re * amp, im * amp);
        if k != n - k {
            spec[n - k] = spec[k].conj();
        } else {
            spec[k] = Complex::new(spec[k].re, 0.0);
        }
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut spec);
    let x: Vec<f64> = spec.iter().map(|c| c.re).collect();
    let mean = x.iter().sum::<f64>() / n as f64;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    x.iter().map(|v| (v - mean) / sd).collect()
}

fn pick_words(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> Vec<(Vec<Phoneme>, Option<Lexicality>)> {
    let parse = |w: &str| -> Vec<Phoneme> { w.chars().map(|c| c.to_string().parse().expect("alphabet")).collect() };
    let mut words = Vec::new();
    for p in Phoneme::ALL {
        for _ in 0..spec.trials_per_class {
            words.push((vec![p], None));
        }
    }
    for _ in 0..spec.diphones_per_subject {
        let c = *Phoneme::CONSONANTS.choose(rng).expect("non-empty");
        let v = *Phoneme::VOWELS.choose(rng).expect("non-empty");
        words.push((vec![c, v], None));
    }
    for _ in 0..spec.cvc_real_per_subject {
        let w = REAL_CVC.choose(rng).expect("non-empty");
        words.push((parse(w), Some(Lexicality::Real)));
    }
    for _ in 0..spec.cvc_pseudo_per_subject {
        loop {
            let w = [
                *Phoneme::CONSONANTS.choose(rng).expect("non-empty"),
                *Phoneme::VOWELS.choose(rng).expect("non-empty"),
                *Phoneme::CONSONANTS.choose(rng).expect("non-empty"),
            ];
            let s: String = w.iter().map(|p| p.symbol()).collect();
            if !REAL_CVC.contains(&s.as_str()) {
                words.push((w.to_vec(), Some(Lexicality::Pseudo)));
                break;
            }
        }
    }
    words.shuffle(rng);
    words
}

fn blink_weight(name: &str) -> f64 {
    match name {
        "Fp1" | "Fp2" | "Fpz" => 1.0,
        "AF7" | "AF8" | "AF3" | "AF4" | "AFz" => 0.7,
        "F7" | "F8" | "F3" | "F4" | "Fz" | "F1" | "F2" | "F5" | "F6" => 0.3,
        _ => 0.05,
    }
}

/// Generates one subject's recording.
pub fn generate_subject(spec: &SynthSpec, subject_idx: usize) -> Result<(String, Recording)> {
    spec.validate()?;
    let subject = SynthSpec::subject_name(subject_idx);
    let mut rng = stream(spec.seed, &[STREAM_SUBJECT, subject_idx as u64]);
    let fs = spec.fs;
    let ms = |v: f64| v / 1000.0 * fs;
    let gain = rng.random_range(spec.subject_gain.0..=spec.subject_gain.1);
    let words = pick_words(&mut rng, spec);

    let mut tms_cycle = TmsCondition::ALL;
    tms_cycle.shuffle(&mut rng);
    let lead = ms(1000.0).round() as usize;
    let mut onsets = Vec::with_capacity(words.len());
    let mut t = lead as f64;
    for _ in 0..words.len() {
        onsets.push(t.round() as usize);
        t += ms(spec.isi_ms + rng.random_range(0.0..=spec.isi_jitter_ms));
    }
    let n = (onsets.last().copied().unwrap_or(lead) as f64 + ms(1500.0)).round() as usize;
    let n_ch = spec.n_channels;
    let mut data = Array2::zeros((n, n_ch));

    if spec.noise_uv > 0.0 {
        for c in 0..n_ch {
            let noise = pink_noise(n, spec.noise_exponent, &mut rng);
            for (i, v) in noise.into_iter().enumerate() {
                data[[i, c]] = v * spec.noise_uv;
            }
        }
    }

    let temps = templates(spec);
    let sigma = ms(spec.template_width_ms);
    let reach = (4.0 * sigma).ceil() as i64;
    let mut events = Vec::with_capacity(words.len());
    for (k, (word, lex)) in words.into_iter().enumerate() {
        let onset = onsets[k];
        for (pos, ph) in word.iter().enumerate() {
            let tpl = &temps[ph.index()];
            if tpl.amplitude_uv == 0.0 {
                continue;
            }
            let centre = onset as f64 + ms(tpl.latency_ms + pos as f64 * 800.0 / 3.0);
            let c0 = centre.round() as i64;
            for i in (c0 - reach).max(0)..(c0 + reach + 1).min(n as i64) {
                let g = (-0.5 * ((i as f64 - centre) / sigma).powi(2)).exp() * tpl.amplitude_uv * gain;
                for c in 0..n_ch {
                    data[[i as usize, c]] += g * tpl.channel_weights[c];
                }
            }
        }
        let tms = tms_cycle[(k / spec.tms_block_len) % 3];
        let label = LabelRecord::new(subject.clone(), word, tms, lex)?;
        events.push(Event { onset_sample: onset, label });
    }

    if spec.blink_rate_hz > 0.0 && spec.blink_amplitude_uv > 0.0 {
        let names = spec.channel_names();
        let dur = ms(250.0).round() as usize;
        let mut t = 0.0;
        loop {
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            t += -u.ln() / spec.blink_rate_hz * fs;
            let start = t.round() as usize;
            if start + dur >= n {
                break;
            }
            for i in 0..dur {
                let shape = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / dur as f64).cos());
                for (c, name) in names.iter().enumerate() {
                    data[[start + i, c]] += spec.blink_amplitude_uv * shape * blink_weight(name);
                }
            }
        }
    }

    let rec = Recording::new(data, fs, spec.channel_names(), events)?;
    Ok((subject, rec))
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<(String, Recording)>> {
    spec.validate()?;
    (0..spec.n_subjects).into_par_iter().map(|s| generate_subject(spec, s)).collect()
}

/// Generates every subject and writes one container directory per subject
/// (`<out>/S01`, ...), returning the directories in subject order.
pub fn write_synthetic(spec: &SynthSpec, out: &Path) -> Result<Vec<PathBuf>> {
    spec.validate()?;
    (0..spec.n_subjects)
        .into_par_iter()
        .map(|s| {
            let (subject, rec) = generate_subject(spec, s)?;
            let dir = out.join(&subject);
            save_container(&dir, &subject, &rec)?;
            Ok(dir)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::container::load_container;
    use rand::SeedableRng;

    fn small() -> SynthSpec {
        SynthSpec {
            n_subjects: 2,
            n_channels: 4,
            trials_per_class: 2,
            cvc_real_per_subject: 3,
            cvc_pseudo_per_subject: 3,
            diphones_per_subject: 2,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn pink_slope() {
        let fs = 2048.0;
        let n = 60 * 2048;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = pink_noise(n, 1.0, &mut rng);
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let (mut sx, mut sy, mut sxx, mut sxy, mut m) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (k, c) in buf.iter().enumerate().take(n / 2) {
            let f = k as f64 * fs / n as f64;
            if (1.0..=100.0).contains(&f) {
                let (lx, ly) = (f.log10(), c.norm_sqr().log10());
                sx += lx;
                sy += ly;
                sxx += lx * lx;
                sxy += lx * ly;
                m += 1.0;
            }
        }
        let slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
        assert!((slope + 1.0).abs() <= 0.15, "slope {slope}");
    }

    #[test]
    fn deterministic_and_consistent() {
        let spec = small();
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].0, "S01");
        let rec = &a[1].1;
        assert_eq!(rec.events().len(), 11 * 2 + 2 + 6);
        for ev in rec.events() {
            assert!(ev.label.is_consistent());
            assert_eq!(ev.label.subject, "S02");
            let cvc = ev.label.word_phonemes.len() == 3;
            assert_eq!(cvc, ev.label.lexicality.is_some());
            if ev.label.lexicality == Some(Lexicality::Pseudo) {
                assert!(!REAL_CVC.contains(&ev.label.word_string().as_str()));
            }
        }
        let other = generate_synthetic(&SynthSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(other[0].1.samples(), a[0].1.samples());
    }

    #[test]
    fn zero_noise_template_placement() {
        let spec = SynthSpec {
            noise_uv: 0.0,
            subject_gain: (1.0, 1.0),
            n_subjects: 1,
            ..small()
        };
        let (_, rec) = generate_subject(&spec, 0).unwrap();
        let temps = templates(&spec);
        for ev in rec.events().iter().filter(|e| e.label.word_phonemes.len() == 1) {
            let t = &temps[ev.label.phoneme.index()];
            let peak = ev.onset_sample + (t.latency_ms / 1000.0 * spec.fs).round() as usize;
            let c = (0..spec.n_channels)
                .max_by(|&a, &b| t.channel_weights[a].abs().total_cmp(&t.channel_weights[b].abs()))
                .unwrap();
            let v = rec.samples()[[peak, c]];
            assert!((v.abs() - spec.template_amplitude_uv).abs() < 0.05, "{v}");
        }
    }

    #[test]
    fn written_containers_load() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small();
        let dirs = write_synthetic(&spec, dir.path()).unwrap();
        assert_eq!(dirs.len(), 2);
        let (subject, rec) = load_container(&dirs[1]).unwrap();
        assert_eq!(subject, "S02");
        assert_eq!(rec.events().len(), 30);
    }

    #[test]
    fn bad_fields_named() {
        let err = SynthSpec { n_channels: 0, ..small() }.validate().unwrap_err();
        assert!(err.to_string().contains("n_channels"));
        let parsed: std::result::Result<SynthSpec, _> = serde_json::from_str(r#"{"n_subjectz": 3}"#);
        assert!(parsed.unwrap_err().to_string().contains("n_subjectz"));
    }
}
