//! Networks: frozen stand-ins for the restorer and the task model, and the
//! trainable gate and transformation modules.

pub mod bundle;
pub mod checkpoint;
pub mod classifier;
pub mod gate;
pub mod init;
pub mod layers;
pub mod ops;
pub mod prediction;
pub mod pretrain;
pub mod restorer;
pub mod transformer;
pub mod translator;

pub use bundle::{FrozenClassifier, FrozenRestorer, ModelBundle, VatArchitecture, VatOutput, VatTranslator};
pub use checkpoint::{CheckpointMeta, ModelRole};
pub use classifier::{ClassifierConfig, TaskClassifier};
pub use gate::{gate_fuse, FusedImage, GateConfig, GateOutput, GatedFusion};
pub use prediction::{BoundingBox, Prediction, PredictionKind, PredictionOutput, SlidingWindowDetector};
pub use restorer::{Restorer, RestorerConfig};
pub use translator::{TranslatorConfig, UShapeTranslator};
