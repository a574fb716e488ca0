//! Persistence: recording containers, epoch archives and the synthetic generator.

pub mod archive;
pub mod container;
pub mod synth;

pub use archive::{load_epochs, save_epochs};
pub use container::{load_container, save_container, ContainerManifest};
pub use synth::{generate_synthetic, write_synthetic, SynthSpec};
