//! Desk-scale data: a procedural 10-class corpus, low-light and haze
//! degradations, and the on-disk split layout.

mod corpus;
mod dataset;
mod degrade;

pub use corpus::{render_source, ShapeKind, CLASS_COUNT, CLASS_NAMES};
pub use dataset::{
    build_datasets, load_split, manifest_path, split_fingerprint, BuiltDatasets, DataConfig, Dataset,
    DegradationConfig, ManifestHeader, ManifestLine, SampleRecord, SplitName,
};
pub use degrade::{degrade_haze, degrade_lowlight, DegradationParams, DepthMode};
