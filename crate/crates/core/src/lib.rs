//! Toy-scale laboratory for entity unlearning through sparse-autoencoder
//! recognition latents.
//!
//! The crate is layered bottom-up: [`tensor`], [`autodiff`] and [`optim`]
//! form the numeric substrate; [`corpus`] builds a synthetic world of
//! entities and facts; [`lm`] is a small transformer trained on it; [`sae`]
//! decomposes its residual stream; [`recognition`] finds latents that fire
//! for known versus unknown names; [`unlearn`] implements the hinge-loss
//! method and gradient-ascent style baselines; [`eval`] measures the result.

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod lm;
pub mod optim;
pub mod recognition;
pub mod rng;
pub mod sae;
pub mod tensor;
pub mod unlearn;

pub use error::{Error, Result};
