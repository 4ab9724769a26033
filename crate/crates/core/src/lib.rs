//! Knowledge-graph auto-encoder for unsupervised report generation.
//!
//! A knowledge graph built from a report corpus serves as a shared latent
//! space; knowledge-driven encoders project images and reports onto it, and
//! a memory-augmented transformer decoder is trained by report auto-encoding
//! so that at inference a report can be generated from an image alone.

pub mod adam;
pub mod checkpoint;
pub mod nn;
pub mod pipeline;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod metrics;
pub mod model;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
