//! Desk-scale benchmark for causal attribute disentanglement.
//!
//! The crate trains a small decoder-only transformer on a synthetic
//! entity-attribute world, then measures how well different featurizers
//! (PCA, sparse autoencoder, adversarial probe, binary masking, learned
//! orthogonal subspaces, and their multi-task variants) isolate single
//! attributes in the residual stream, using interchange interventions and
//! Cause / Iso / Disentangle scores.
//!
//! Modules follow the pipeline: [`world`] generates data, [`lm`] trains the
//! model, [`featurize`] fits featurizers, [`intervene`] splices activations,
//! [`eval`] scores, and [`pipeline`] ties the stages to files and the CLI.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod featurize;
pub mod intervene;
pub mod lm;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod world;

pub use error::{Error, Result};
