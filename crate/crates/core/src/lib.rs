//! Retrieval-augmented report generation for 3D stroke MRI, desk scale.
//!
//! The pipeline: synthetic 2-channel phantoms -> masked-autoencoder
//! pretraining of a 3D ViT -> supervised territory fine-tuning -> a frozen
//! cosine-similarity embedding database -> templated radiology reports
//! augmented with the findings of the retrieved neighbors.

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod layers;
pub mod nn;
pub mod phantom;
pub mod retrieval;
pub mod seeding;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
