//! Synthetic data through containers, preprocessing, archives and LOSO.

use eegphon_core::baselines::{LrConfig, PooledLr};
use eegphon_core::dda::{preprocess_dda, DdaParams};
use eegphon_core::epochs::{ItemSet, EPOCH_WINDOW_MS};
use eegphon_core::io::archive::{load_epochs, save_epochs};
use eegphon_core::io::container::load_container;
use eegphon_core::io::synth::{generate_subject, write_synthetic, SynthSpec};
use eegphon_core::preprocess::{preprocess_erp, ErpConfig};
use eegphon_core::stats::run_loso;
use eegphon_core::{EpochSet, SampleUnit, Task};

fn small_spec() -> SynthSpec {
    SynthSpec {
        n_subjects: 3,
        n_channels: 4,
        trials_per_class: 3,
        cvc_real_per_subject: 2,
        cvc_pseudo_per_subject: 2,
        seed: 17,
        ..SynthSpec::default()
    }
}

#[test]
fn container_round_trip_preserves_recordings() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec();
    let paths = write_synthetic(&spec, dir.path()).unwrap();
    assert_eq!(paths.len(), 3);
    for (i, p) in paths.iter().enumerate() {
        let (subject, rec) = load_container(p).unwrap();
        let (want_subject, want) = generate_subject(&spec, i).unwrap();
        assert_eq!(subject, want_subject);
        assert_eq!(rec.events(), want.events());
        let err = (rec.samples() - want.samples()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = want.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err <= scale * 1e-6, "max sample error {err}");
    }
}

#[test]
fn archive_round_trip_keeps_labels_and_values() {
    let (_, rec) = generate_subject(&small_spec(), 0).unwrap();
    let (set, _) = preprocess_dda(&rec, &DdaParams::default(), EPOCH_WINDOW_MS).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dda.epo");
    let prov = serde_json::json!({ "feature": "dda" });
    save_epochs(&path, &set, &prov).unwrap();
    let (back, prov_back) = load_epochs(&path).unwrap();
    assert_eq!(prov_back["feature"], "dda");
    assert_eq!(back.labels, set.labels);
    assert_eq!(back.n_times(), set.n_times());
    // values are stored in single precision
    for (a, b) in back.data.iter().zip(set.data.iter()) {
        assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn loso_on_planted_templates_beats_chance() {
    let spec = SynthSpec { n_subjects: 4, n_channels: 8, trials_per_class: 12, ..small_spec() };
    let sets: Vec<EpochSet> = (0..spec.n_subjects)
        .map(|i| {
            let (_, rec) = generate_subject(&spec, i).unwrap();
            preprocess_erp(&rec, &ErpConfig { seed: i as u64, ..ErpConfig::default() }).unwrap().0
        })
        .collect();
    let epochs = EpochSet::concat(&sets).unwrap();
    let items = ItemSet::from_epochs(&epochs, SampleUnit::Trial).unwrap();
    let run = run_loso(&items, Task::Voicing, &PooledLr { cfg: LrConfig::default() }, 3).unwrap();
    assert_eq!(run.summary.completed, 4);
    for r in run.reports() {
        assert!(!r.train_subjects.contains(&r.test_subject));
        assert_eq!(r.train_subjects.len(), 3);
    }
    let targets: Vec<usize> = items.targets(Task::Voicing).into_iter().flatten().collect();
    let voiced = targets.iter().filter(|&&t| t == 1).count() as f64 / targets.len() as f64;
    let majority = voiced.max(1.0 - voiced);
    // pooling averages away most of the template time course, so the lift is small
    assert!(run.summary.accuracy.mean > majority + 0.04, "{:?} vs majority {majority}", run.summary.accuracy);
    let again = run_loso(&items, Task::Voicing, &PooledLr { cfg: LrConfig::default() }, 3).unwrap();
    assert_eq!(run, again);
}
