//! Closed phoneme alphabet and the articulatory label schema.
//!
//! Class indices follow alphabetical phoneme order
//! (`a b d e i o p s t u z`); every logit vector and confusion matrix in the
//! crate uses that order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Phoneme {
    A,
    B,
    D,
    E,
    I,
    O,
    P,
    S,
    T,
    U,
    Z,
}

impl Phoneme {
    pub const ALL: [Phoneme; 11] = [
        Phoneme::A,
        Phoneme::B,
        Phoneme::D,
        Phoneme::E,
        Phoneme::I,
        Phoneme::O,
        Phoneme::P,
        Phoneme::S,
        Phoneme::T,
        Phoneme::U,
        Phoneme::Z,
    ];
    pub const CONSONANTS: [Phoneme; 6] = [
        Phoneme::B,
        Phoneme::D,
        Phoneme::P,
        Phoneme::S,
        Phoneme::T,
        Phoneme::Z,
    ];
    pub const VOWELS: [Phoneme; 5] = [Phoneme::A, Phoneme::E, Phoneme::I, Phoneme::O, Phoneme::U];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(idx: usize) -> Option<Phoneme> {
        Self::ALL.get(idx).copied()
    }

    pub fn symbol(self) -> char {
        b"abdeiopstuz"[self.index()] as char
    }

    pub fn is_vowel(self) -> bool {
        matches!(
            self,
            Phoneme::A | Phoneme::E | Phoneme::I | Phoneme::O | Phoneme::U
        )
    }
}

impl fmt::Display for Phoneme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.symbol())
    }
}

impl FromStr for Phoneme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Phoneme::ALL
                .iter()
                .copied()
                .find(|p| p.symbol() == c)
                .ok_or_else(|| Error::UnknownPhoneme(s.to_string())),
            _ => Err(Error::UnknownPhoneme(s.to_string())),
        }
    }
}

impl From<Phoneme> for String {
    fn from(p: Phoneme) -> String {
        p.to_string()
    }
}

impl TryFrom<String> for Phoneme {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Place {
    Alveolar,
    Bilabial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Manner {
    Fricative,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Voicing {
    Voiced,
    Unvoiced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Consonant,
    Vowel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Complexity {
    Single,
    Diphone,
    Triphone,
}

impl Complexity {
    pub fn from_len(len: usize) -> Result<Self> {
        match len {
            1 => Ok(Complexity::Single),
            2 => Ok(Complexity::Diphone),
            3 => Ok(Complexity::Triphone),
            n => Err(Error::invalid(format!(
                "word must have 1 to 3 phonemes, got {n}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TmsCondition {
    #[serde(rename = "NULL")]
    Null,
    LipTMS,
    TongueTMS,
}

impl TmsCondition {
    pub const ALL: [TmsCondition; 3] = [
        TmsCondition::Null,
        TmsCondition::LipTMS,
        TmsCondition::TongueTMS,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TmsCondition::Null => "NULL",
            TmsCondition::LipTMS => "LipTMS",
            TmsCondition::TongueTMS => "TongueTMS",
        }
    }
}

impl FromStr for TmsCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TmsCondition::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown TMS condition {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lexicality {
    Real,
    Pseudo,
}

impl Lexicality {
    pub fn as_str(self) -> &'static str {
        match self {
            Lexicality::Real => "real",
            Lexicality::Pseudo => "pseudo",
        }
    }
}

/// Parses `real`, `pseudo`, or `n/a` (→ `None`).
pub fn parse_lexicality(s: &str) -> Result<Option<Lexicality>> {
    match s {
        "real" => Ok(Some(Lexicality::Real)),
        "pseudo" => Ok(Some(Lexicality::Pseudo)),
        "n/a" => Ok(None),
        other => Err(Error::invalid(format!("unknown lexicality {other:?}"))),
    }
}

/// Articulatory labels fully determined by a phoneme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Articulation {
    pub place: Option<Place>,
    pub manner: Option<Manner>,
    pub voicing: Option<Voicing>,
    pub category: Category,
}

pub fn derive_labels(phoneme: Phoneme) -> Articulation {
    use Phoneme::*;
    if phoneme.is_vowel() {
        return Articulation {
            place: None,
            manner: None,
            voicing: None,
            category: Category::Vowel,
        };
    }
    let place = match phoneme {
        B | P => Place::Bilabial,
        _ => Place::Alveolar,
    };
    let manner = match phoneme {
        S | Z => Manner::Fricative,
        _ => Manner::Stop,
    };
    let voicing = match phoneme {
        B | D | Z => Voicing::Voiced,
        _ => Voicing::Unvoiced,
    };
    Articulation {
        place: Some(place),
        manner: Some(manner),
        voicing: Some(voicing),
        category: Category::Consonant,
    }
}

/// Parses a phoneme symbol and derives its articulation, naming the symbol on failure.
pub fn derive_labels_str(symbol: &str) -> Result<Articulation> {
    Ok(derive_labels(symbol.parse()?))
}

/// Per-trial label record.
///
/// `phoneme` is the primary class of the trial; for multi-phoneme words it is
/// the first phoneme of `word_phonemes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub subject: String,
    pub phoneme: Phoneme,
    pub place: Option<Place>,
    pub manner: Option<Manner>,
    pub voicing: Option<Voicing>,
    pub category: Category,
    pub complexity: Complexity,
    pub tms: TmsCondition,
    pub lexicality: Option<Lexicality>,
    pub word_phonemes: Vec<Phoneme>,
}

impl LabelRecord {
    pub fn new(
        subject: impl Into<String>,
        word_phonemes: Vec<Phoneme>,
        tms: TmsCondition,
        lexicality: Option<Lexicality>,
    ) -> Result<Self> {
        let complexity = Complexity::from_len(word_phonemes.len())?;
        let phoneme = word_phonemes[0];
        let art = derive_labels(phoneme);
        Ok(LabelRecord {
            subject: subject.into(),
            phoneme,
            place: art.place,
            manner: art.manner,
            voicing: art.voicing,
            category: art.category,
            complexity,
            tms,
            lexicality,
            word_phonemes,
        })
    }

    /// Checks that every derived field agrees with `phoneme` and `word_phonemes`.
    pub fn is_consistent(&self) -> bool {
        let art = derive_labels(self.phoneme);
        art.place == self.place
            && art.manner == self.manner
            && art.voicing == self.voicing
            && art.category == self.category
            && self.word_phonemes.first() == Some(&self.phoneme)
            && Complexity::from_len(self.word_phonemes.len()).ok() == Some(self.complexity)
    }

    pub fn word_string(&self) -> String {
        self.word_phonemes.iter().map(|p| p.symbol()).collect()
    }
}

/// Classification targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Phoneme,
    Place,
    Manner,
    Voicing,
    Category,
    Complexity,
}

impl Task {
    pub const ALL: [Task; 6] = [
        Task::Phoneme,
        Task::Place,
        Task::Manner,
        Task::Voicing,
        Task::Category,
        Task::Complexity,
    ];
    /// Heads trained jointly in multi-task mode.
    pub const ARTICULATORY: [Task; 4] = [Task::Phoneme, Task::Place, Task::Manner, Task::Voicing];

    pub fn n_classes(self) -> usize {
        match self {
            Task::Phoneme => 11,
            Task::Complexity => 3,
            _ => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Phoneme => "phoneme",
            Task::Place => "place",
            Task::Manner => "manner",
            Task::Voicing => "voicing",
            Task::Category => "category",
            Task::Complexity => "complexity",
        }
    }

    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            Task::Phoneme => &["a", "b", "d", "e", "i", "o", "p", "s", "t", "u", "z"],
            Task::Place => &["alveolar", "bilabial"],
            Task::Manner => &["fricative", "stop"],
            Task::Voicing => &["voiced", "unvoiced"],
            Task::Category => &["consonant", "vowel"],
            Task::Complexity => &["single", "diphone", "triphone"],
        }
    }

    /// Class index of a phoneme under this task; `None` when the task is
    /// undefined for it (vowels on place/manner/voicing) or trial-level.
    pub fn phoneme_target(self, phoneme: Phoneme) -> Option<usize> {
        let art = derive_labels(phoneme);
        match self {
            Task::Phoneme => Some(phoneme.index()),
            Task::Place => art.place.map(|p| p as usize),
            Task::Manner => art.manner.map(|m| m as usize),
            Task::Voicing => art.voicing.map(|v| v as usize),
            Task::Category => Some(art.category as usize),
            Task::Complexity => None,
        }
    }

    /// Class index of a whole trial.
    pub fn trial_target(self, label: &LabelRecord) -> Option<usize> {
        match self {
            Task::Complexity => Some(label.complexity as usize),
            _ => self.phoneme_target(label.phoneme),
        }
    }

    /// Binary articulatory tasks; vowel trials are excluded from these.
    pub fn is_binary_articulatory(self) -> bool {
        matches!(self, Task::Place | Task::Manner | Task::Voicing)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown task {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_b_s_a() {
        let b = derive_labels_str("b").unwrap();
        assert_eq!(b.place, Some(Place::Bilabial));
        assert_eq!(b.manner, Some(Manner::Stop));
        assert_eq!(b.voicing, Some(Voicing::Voiced));
        assert_eq!(b.category, Category::Consonant);

        let s = derive_labels_str("s").unwrap();
        assert_eq!(
            (s.place, s.manner, s.voicing, s.category),
            (
                Some(Place::Alveolar),
                Some(Manner::Fricative),
                Some(Voicing::Unvoiced),
                Category::Consonant
            )
        );

        let a = derive_labels_str("a").unwrap();
        assert_eq!((a.place, a.manner, a.voicing), (None, None, None));
        assert_eq!(a.category, Category::Vowel);
    }

    #[test]
    fn unknown_symbol_is_named() {
        let err = derive_labels_str("q").unwrap_err();
        assert!(err.to_string().contains("\"q\""), "{err}");
        assert!("ab".parse::<Phoneme>().is_err());
        assert!("".parse::<Phoneme>().is_err());
    }

    #[test]
    fn alphabetical_class_order() {
        let syms: String = Phoneme::ALL.iter().map(|p| p.symbol()).collect();
        assert_eq!(syms, "abdeiopstuz");
        for (i, p) in Phoneme::ALL.iter().enumerate() {
            assert_eq!(p.index(), i);
            assert_eq!(Phoneme::from_index(i), Some(*p));
        }
    }

    #[test]
    fn full_mapping_table() {
        use Phoneme::*;
        for p in Phoneme::ALL {
            let art = derive_labels(p);
            assert_eq!(art.place.is_none(), p.is_vowel());
            assert_eq!(art.manner.is_none(), p.is_vowel());
            assert_eq!(art.voicing.is_none(), p.is_vowel());
        }
        let bilabial: Vec<_> = Phoneme::ALL
            .into_iter()
            .filter(|&p| derive_labels(p).place == Some(Place::Bilabial))
            .collect();
        assert_eq!(bilabial, vec![B, P]);
        let voiced: Vec<_> = Phoneme::ALL
            .into_iter()
            .filter(|&p| derive_labels(p).voicing == Some(Voicing::Voiced))
            .collect();
        assert_eq!(voiced, vec![B, D, Z]);
        let fric: Vec<_> = Phoneme::ALL
            .into_iter()
            .filter(|&p| derive_labels(p).manner == Some(Manner::Fricative))
            .collect();
        assert_eq!(fric, vec![S, Z]);
    }

    #[test]
    fn label_record_consistency() {
        let rec = LabelRecord::new(
            "S01",
            vec![Phoneme::B, Phoneme::A, Phoneme::T],
            TmsCondition::Null,
            Some(Lexicality::Real),
        )
        .unwrap();
        assert!(rec.is_consistent());
        assert_eq!(rec.complexity, Complexity::Triphone);
        assert_eq!(rec.word_string(), "bat");
        let mut bad = rec.clone();
        bad.place = Some(Place::Alveolar);
        assert!(!bad.is_consistent());
        assert!(LabelRecord::new("S01", vec![], TmsCondition::Null, None).is_err());
    }

    #[test]
    fn task_targets() {
        assert_eq!(Task::Phoneme.phoneme_target(Phoneme::Z), Some(10));
        assert_eq!(Task::Place.phoneme_target(Phoneme::A), None);
        assert_eq!(Task::Category.phoneme_target(Phoneme::A), Some(1));
        for t in Task::ALL {
            assert_eq!(t.class_names().len(), t.n_classes());
            assert_eq!(t.as_str().parse::<Task>().unwrap(), t);
        }
    }

    #[test]
    fn serde_round_trip() {
        let rec = LabelRecord::new("S02", vec![Phoneme::S], TmsCondition::LipTMS, None).unwrap();
        let js = serde_json::to_string(&rec).unwrap();
        assert!(js.contains("\"LipTMS\""));
        let back: LabelRecord = serde_json::from_str(&js).unwrap();
        assert_eq!(back, rec);
    }
}
