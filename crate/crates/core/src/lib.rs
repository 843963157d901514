//! Fair node representation learning on attributed graphs.
//!
//! The pipeline splits a graph into feature, structural and diffusion views
//! ([`views`]), encodes each with a variational encoder, fuses the codes and
//! decodes labels conditioned on the sensitive attribute ([`model`]), then
//! scores utility and group fairness ([`eval`]). [`harness`] drives training,
//! multi-seed experiments and ablations on top of the tape engine in
//! [`engine`].

pub mod engine;
pub mod eval;
pub mod graph;
pub mod harness;
pub mod model;
pub mod views;

mod error;

pub use error::{Error, Result};
