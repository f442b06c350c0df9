//! Multi-party multi-modal multi-label emotion recognition pipeline.
//!
//! The crate is organized around a small reverse-mode autodiff engine
//! ([`autodiff`]) and builds the full training pipeline on top of it:
//! synthetic corpus generation and storage ([`corpus`]), multi-party context
//! embedding ([`embedding`]), adversarial commonality and specificity
//! factorization ([`adversary`]), two-level reconstruction of missing
//! modalities ([`reconstructor`]), prototype-based contrastive supervision
//! ([`prototypes`]), stack-shuffle augmentation ([`shuffler`]), the trainer
//! itself ([`trainer`]) and the evaluation harness ([`harness`]).

pub mod autodiff;
pub mod adversary;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod nn;
pub mod prototypes;
pub mod reconstructor;
pub mod harness;
pub mod shuffler;
pub mod trainer;

pub use corpus::{Batch, ClipSample, Corpus, DropoutPolicy, FeatureKey, FusionOrder, Modality, Split};
pub use error::{Error, Result};
