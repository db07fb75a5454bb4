//! Patient-history representation learning over ICD-10 code sequences.
//!
//! The pipeline: [`corpus`] ingests or synthesizes histories and owns the
//! token vocabulary; [`encoder`] trains a small transformer with masked-token
//! prediction; [`embedding`] pools contextual vectors into patient vectors;
//! [`evaluation`] measures next-code and next-visit prediction; [`scoring`]
//! feeds the embeddings into a ridge insurance-risk model with drift checks.

pub mod container;
pub mod corpus;
pub mod embedding;
pub mod encoder;
mod error;
pub mod evaluation;
pub mod linalg;
pub mod scoring;

pub use error::{Error, Result};
