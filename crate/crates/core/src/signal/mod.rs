//! Clips, spectral featurization, normalization, class balancing, the
//! synthetic VAR generator and the on-disk dataset container.

mod balance;
mod clip;
mod container;
mod features;
mod norm;
mod synthetic;

pub use balance::balance_undersample;
pub use clip::{segment_clips, GraphSequence, RecordingClip, UNLABELED};
pub use container::{read_dataset, read_manifest, write_dataset, ArrayEntry, Dataset, Manifest};
pub use features::{
    feature_dim, featurize_all, featurize_frequency, window_count, window_samples, Taper,
    WindowedFeatures,
};
pub use norm::NormStats;
pub use synthetic::{generate_synthetic, simulate_var, Regime, SyntheticSpec, VarCoefficients};
