//! Variational translator (VaT): a small trainable bridge between a frozen
//! image-restoration model and a frozen downstream vision model.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`oracle`] exact finite-distribution checks of the variational objective.
//! * [`synthdata`] desk-scale corpus synthesis, degradations and dataset IO.
//! * [`nets`] frozen stubs (restorer, classifier) and the trainable gate and
//!   U-shaped transformation modules.
//! * [`uncertainty`] Nadaraya–Watson uncertainty over task-model embeddings.
//! * [`pseudolabel`] view merging, NMS and uncertainty filtering.
//! * [`trainer`] cycle, mixup and marginal-likelihood losses and the loop.
//! * [`eval`] metrics, sweeps, ablations and plots.
//! * [`experiment`] end-to-end orchestration used by the CLI and acceptance tests.

pub mod error;
pub mod eval;
pub mod experiment;
pub mod fingerprint;
pub mod image;
pub mod nets;
pub mod oracle;
pub mod pseudolabel;
pub mod synthdata;
pub mod trainer;
pub mod uncertainty;

pub use error::{Result, VatError};
pub use image::ImageTensor;
