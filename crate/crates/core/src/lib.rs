//! Multi-modal adversarial short product title generation.
//!
//! A sequence-to-sequence generator reads a long product title, its
//! attribute tags and an image feature vector and emits a short title. It
//! is pretrained by maximum likelihood and then trained against an LSTM
//! discriminator with Monte-Carlo rollout policy gradients interleaved with
//! teacher forcing.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod discriminator;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod generator;
pub mod nn;
pub mod optim;
pub mod policy;
pub mod trainer;

pub use error::{Error, Result};
