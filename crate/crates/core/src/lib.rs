//! HardKumaraswamy gates and latent rationale models.
//!
//! The crate is layered bottom-up: a small reverse-mode autodiff engine
//! ([`autodiff`]), the HardKuma distribution with reparameterized sampling
//! ([`dist`]), expected-sparsity penalties with a Lagrangian rate controller
//! ([`sparsity`]), extractor/classifier and attention models ([`model`]),
//! synthetic corpora ([`corpus`]) and the training driver ([`train`]).

pub mod autodiff;
pub mod corpus;
pub mod dist;
pub mod error;
pub mod model;
pub mod optim;
pub mod sparsity;
pub mod train;

pub use error::{Error, Result};
