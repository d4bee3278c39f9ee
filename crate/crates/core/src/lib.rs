//! Domain-adaptive node embeddings for two unconnected graphs.
//!
//! One GCN encoder with shared weights embeds both graphs. It is trained on a
//! first-order edge-reconstruction loss with negative sampling, plus a
//! least-squares adversarial term that pulls the two embedding distributions
//! together. A classifier fit on one graph's embeddings can then be applied to
//! the other graph.
//!
//! * [`graph`]: graph data, file loading, the normalized propagation operator, negative sampling
//! * [`compute`]: dense/sparse kernels and a reverse-mode tape
//! * [`model`]: encoder, discriminator, losses, checkpoints
//! * [`train`]: the alternating optimization loop
//! * [`eval`]: transfer classification, F1, MMD², PCA projection
//! * [`synth`]: synthetic block-model graph pairs
//! * [`cli`]: the `dane` command-line driver

pub mod cli;
pub mod compute;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod seed;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
