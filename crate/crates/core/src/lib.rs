//! Core of the EEG phoneme-decoding benchmark.
//!
//! Two feature pathways turn a continuous [`Recording`] into an [`EpochSet`]:
//!
//! ```text
//! Recording ─┬─ resample → notch → bandpass → CAR → ICA → epoch   (ERP, T × C)
//!            └─ sliding DDA on the broadband signal → epoch + stride (DDA, T × 3C)
//! ```
//!
//! Alongside the pathways live the on-disk container format and synthetic
//! generator ([`io`]), the evaluation metrics, statistics and confound controls
//! ([`stats`]) and the classical pooled-feature baselines ([`baselines`]).

pub mod baselines;
pub mod dda;
pub mod epochs;
pub mod error;
pub mod io;
pub mod labels;
pub mod preprocess;
pub mod recording;
pub mod rng;
pub mod split;
pub mod stats;

pub use epochs::{EpochSet, FeatureKind, Item, ItemSet, SampleUnit};
pub use error::{Error, Result};
pub use labels::{LabelRecord, Phoneme, Task};
pub use recording::{Event, Recording};
pub use split::{DatasetSplit, SplitScheme};
