//! Synthetic wet-fingerprint data: clean ridge patterns, binary ground truth,
//! darkening-stamp noise and on-disk datasets.

pub mod clean;
pub mod dataset;
pub mod wet;

pub use clean::{binarize, generate_clean, RidgeParams};
pub use dataset::{
    generate_triplet, regenerate, write_dataset, Dataset, DatasetSpec, Manifest, ManifestEntry,
    SampleTriplet,
};
pub use wet::{synthesize_wet, synthesize_wet_logged, NoiseParams, Stamp, StampNorm, WetSynthesis};
