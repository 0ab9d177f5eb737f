//! Deterministic synthetic datasets with controllable foreground/background bias.

mod manifest;
pub mod pnm;
mod scene;

pub use manifest::{
    bias_broken_splits, generate_dataset, sha256_hex, write_split, Dataset, DatasetManifest, ManifestEntry,
};
pub use scene::{Background, ClassSpec, Rgb, Sample, SceneSpec, Shape, Side, SplitKind};
