//! Subject-level train/validation/test splits.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitScheme {
    Fixed,
    Loso,
    Expanded,
}

impl std::str::FromStr for SplitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(SplitScheme::Fixed),
            "loso" => Ok(SplitScheme::Loso),
            "expanded" => Ok(SplitScheme::Expanded),
            other => Err(Error::invalid(format!("unknown split scheme {other:?}"))),
        }
    }
}

/// Pairwise-disjoint subject sets. Disjointness is checked at construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    train: BTreeSet<String>,
    val: BTreeSet<String>,
    test: BTreeSet<String>,
    scheme: SplitScheme,
}

impl DatasetSplit {
    pub fn new(
        train: BTreeSet<String>,
        val: BTreeSet<String>,
        test: BTreeSet<String>,
        scheme: SplitScheme,
    ) -> Result<Self> {
        let split = DatasetSplit {
            train,
            val,
            test,
            scheme,
        };
        split.validate()?;
        Ok(split)
    }

    /// Re-checks the disjointness and scheme invariants.
    pub fn validate(&self) -> Result<()> {
        let pairs = [
            ("train", &self.train, "val", &self.val),
            ("train", &self.train, "test", &self.test),
            ("val", &self.val, "test", &self.test),
        ];
        for (an, a, bn, b) in pairs {
            if let Some(s) = a.intersection(b).next() {
                return Err(Error::invalid(format!(
                    "subject {s} appears in both {an} and {bn}"
                )));
            }
        }
        if self.scheme == SplitScheme::Loso && self.test.len() != 1 {
            return Err(Error::invalid(format!(
                "loso split must hold out exactly one subject, got {}",
                self.test.len()
            )));
        }
        Ok(())
    }

    pub fn train(&self) -> &BTreeSet<String> {
        &self.train
    }

    pub fn val(&self) -> &BTreeSet<String> {
        &self.val
    }

    pub fn test(&self) -> &BTreeSet<String> {
        &self.test
    }

    pub fn scheme(&self) -> SplitScheme {
        self.scheme
    }

    /// The held-out subject of a LOSO fold.
    pub fn test_subject(&self) -> Option<&str> {
        match self.scheme {
            SplitScheme::Loso => self.test.iter().next().map(String::as_str),
            _ => None,
        }
    }
}

fn set<I: IntoIterator<Item = S>, S: Into<String>>(it: I) -> BTreeSet<String> {
    it.into_iter().map(Into::into).collect()
}

/// One fold per subject: that subject is the test set, everyone else trains.
pub fn make_loso_folds<S: AsRef<str>>(subjects: &[S]) -> Result<Vec<DatasetSplit>> {
    let all: BTreeSet<String> = subjects.iter().map(|s| s.as_ref().to_string()).collect();
    if all.len() < 2 {
        return Err(Error::invalid(format!(
            "LOSO needs at least 2 subjects, got {}",
            all.len()
        )));
    }
    all.iter()
        .map(|held| {
            let train = all.iter().filter(|s| *s != held).cloned().collect();
            DatasetSplit::new(train, BTreeSet::new(), set([held.clone()]), SplitScheme::Loso)
        })
        .collect()
}

/// Study-2 fixed split: validation S04/S09/S14, the remaining S-subjects train,
/// and Study-1 (`P*`) subjects, when present, form the cross-study test set.
pub fn fixed_split<S: AsRef<str>>(subjects: &[S]) -> Result<DatasetSplit> {
    const VAL: [&str; 3] = ["S04", "S09", "S14"];
    let mut train = BTreeSet::new();
    let mut val = BTreeSet::new();
    let mut test = BTreeSet::new();
    for s in subjects.iter().map(AsRef::as_ref) {
        if VAL.contains(&s) {
            val.insert(s.to_string());
        } else if s.starts_with('P') {
            test.insert(s.to_string());
        } else {
            train.insert(s.to_string());
        }
    }
    if train.is_empty() {
        return Err(Error::invalid("fixed split has no training subjects"));
    }
    DatasetSplit::new(train, val, test, SplitScheme::Fixed)
}

/// Expanded split: S01–S08 train, S09–S16 validation.
pub fn expanded_split<S: AsRef<str>>(subjects: &[S]) -> Result<DatasetSplit> {
    let mut train = BTreeSet::new();
    let mut val = BTreeSet::new();
    for s in subjects.iter().map(AsRef::as_ref) {
        let num = s
            .strip_prefix('S')
            .and_then(|n| n.parse::<u32>().ok());
        match num {
            Some(1..=8) => {
                train.insert(s.to_string());
            }
            Some(9..=16) => {
                val.insert(s.to_string());
            }
            _ => {}
        }
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid(
            "expanded split needs subjects in both S01-S08 and S09-S16",
        ));
    }
    DatasetSplit::new(train, val, BTreeSet::new(), SplitScheme::Expanded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn subjects(n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("S{i:02}")).collect()
    }

    #[test]
    fn sixteen_subjects_sixteen_folds() {
        let folds = make_loso_folds(&subjects(16)).unwrap();
        assert_eq!(folds.len(), 16);
        for f in &folds {
            assert_eq!(f.train().len(), 15);
            assert!(f.train().is_disjoint(f.test()));
        }
    }

    #[test]
    fn two_subjects() {
        let folds = make_loso_folds(&["A", "B"]).unwrap();
        assert_eq!(folds[0].test_subject(), Some("A"));
        assert_eq!(folds[0].train(), &set(["B"]));
        assert_eq!(folds[1].test_subject(), Some("B"));
        assert_eq!(folds[1].train(), &set(["A"]));
    }

    #[test]
    fn too_few_subjects() {
        assert!(make_loso_folds(&["A"]).is_err());
        assert!(make_loso_folds(&["A", "A"]).is_err());
    }

    #[test]
    fn overlap_rejected() {
        let err = DatasetSplit::new(set(["A", "B"]), set(["B"]), set([] as [&str; 0]), SplitScheme::Fixed);
        assert!(err.is_err());
        let err = DatasetSplit::new(set(["A"]), set([] as [&str; 0]), set(["B", "C"]), SplitScheme::Loso);
        assert!(err.is_err());
    }

    #[test]
    fn presets() {
        let mut subs = subjects(16);
        subs.extend((1..=8).map(|i| format!("P{i:02}")));
        let fixed = fixed_split(&subs).unwrap();
        assert_eq!(fixed.train().len(), 13);
        assert_eq!(fixed.val(), &set(["S04", "S09", "S14"]));
        assert_eq!(fixed.test().len(), 8);
        let exp = expanded_split(&subs).unwrap();
        assert_eq!(exp.train(), &set(subjects(8)));
        assert_eq!(exp.val().len(), 8);
        assert!(exp.val().contains("S16"));
    }

    proptest! {
        #[test]
        fn loso_is_partition(n in 2usize..30) {
            let subs = subjects(n);
            let folds = make_loso_folds(&subs).unwrap();
            let mut seen = BTreeSet::new();
            for f in &folds {
                let t = f.test_subject().unwrap().to_string();
                prop_assert!(seen.insert(t.clone()));
                prop_assert!(!f.train().contains(&t));
                prop_assert_eq!(f.train().len() + 1, n);
            }
            prop_assert_eq!(seen, set(subs));
        }
    }
}
