//! Data ingestion, synthetic data, augmentation, training and evaluation.

pub mod augment;
pub mod data;
pub mod eval;
pub mod manifest;
pub mod synth;
pub mod train;

pub use augment::{augment, AugmentToggles};
pub use data::{horizon_from_gt, load_sample, load_split, prepare, LoadedSample, PreparedSample};
pub use eval::{evaluate, evaluate_samples, EvalOptions, EvalReport};
pub use manifest::{Manifest, SampleRecord, Split};
pub use synth::{generate_synthetic, RoomFamily, SynthSpec};
pub use train::{train, BatchMixing, TrainConfig, TrainOutcome};
