//! Visually-semantic part-type embeddings for generalized zero-shot recognition.
//!
//! The pipeline maps a convolutional feature grid to `M` attended part
//! features, fits a per-part isotropic Gaussian mixture over those features
//! and embeds every instance as the `M x K` matrix of posterior type
//! probabilities. Classes are then recognized either through a semantic
//! codebook (attribute vectors) or through class-averaged embeddings revealed
//! by an independently trained visual oracle.
//!
//! Module map:
//!
//! * [`numerics`]: stable densities, Adam, finite-difference gradient checks.
//! * [`datamodel`]: VSEF tensor files, dataset directories, the planted generator.
//! * [`attention`]: channel-grouping attention and the part-learning loss.
//! * [`mixture`]: EM over part features and inference of the embedding.
//! * [`potentials`]: classifier, semantic mapper, hinge and Frobenius potentials.
//! * [`oracle`]: the visual oracle supplying embedding supervision.
//! * [`trainer`]: the alternating two-step training loop and checkpoints.
//! * [`evaluator`]: class-averaged top-1, seen/unseen accuracy, harmonic mean.

pub mod attention;
pub mod checkpoint;
pub mod datamodel;
pub mod error;
pub mod evaluator;
pub mod kmeans;
pub mod mixture;
pub mod nnls;
pub mod numerics;
pub mod oracle;
pub mod par;
pub mod potentials;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
