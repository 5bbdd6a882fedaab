//! Latent-space sentence generation: an LSTM autoencoder learns a sentence
//! latent space, a ResNet generator/critic pair trained with the
//! gradient-penalty Wasserstein objective samples new points in it, and the
//! evaluation tools score the decoded text.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gan;
pub mod generation;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod projection;
pub mod seq;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
