//! Self-supervised pretraining for spectral imagery.
//!
//! Two pretext tasks share one transformer encoder:
//!
//! * [`objssl`]: multi-view self-distillation between a student and a
//!   momentum teacher, fed by the spatial/spectral view pipeline in
//!   [`augment`].
//! * [`pixssl`]: a spectral masked autoencoder that reconstructs masked band
//!   groups of per-pixel spectra.
//!
//! Pretrained encoders are evaluated with linear probing or fine-tuning
//! ([`downstream`]) and scored with the multi-label and regression metrics in
//! [`metrics`]. [`data`] provides the cube format, manifests and a synthetic
//! spectral-unmixing dataset with analytic labels.

pub mod augment;
pub mod autodiff;
mod binio;
pub mod checkpoint;
pub mod data;
pub mod downstream;
pub mod error;
pub mod gradcheck;
pub mod kv;
pub mod metrics;
pub mod objssl;
pub mod optim;
pub mod params;
pub mod pixssl;
pub mod schedule;
pub mod tensor;
pub mod transformer;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use kv::KeyValues;
pub use params::ParamSet;
pub use tensor::Tensor;
