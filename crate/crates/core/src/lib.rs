//! Teacher/student distillation for multimodal sequence classification
//! when modalities are missing.
//!
//! A teacher network is trained on complete three-modality sequences and
//! frozen. A student with the same architecture is then trained on randomly
//! corrupted copies of the same samples under three distillation objectives:
//! a sample-level contrastive loss on the joint representations, a
//! prototype-similarity matching loss, and a mutual-information consistency
//! loss on decoupled target / non-target responses.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! `*64` / `*32` aliases below name the common instantiations.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod checks;
pub mod config;
pub mod corruption;
pub mod datasets;
pub mod distill;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod scalar;
pub mod seed;
pub mod statnet;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Dataset64 = datasets::Dataset<f64>;
pub type Dataset32 = datasets::Dataset<f32>;
pub type ModalitySample64 = datasets::ModalitySample<f64>;
pub type FusionNet64 = model::FusionNet<f64>;
pub type FusionNet32 = model::FusionNet<f32>;
pub type Checkpoint64 = distill::Checkpoint<f64>;
pub type Checkpoint32 = distill::Checkpoint<f32>;
pub type StatNet64 = statnet::StatNet<f64>;
