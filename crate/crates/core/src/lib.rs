//! Targeted molecular design by gradient descent in a continuous latent space.
//!
//! A graph convolutional network summarises a protein binding site into a
//! fixed-length signature. Differentiable heads predict binding and
//! chemical properties of a latent chemical, and [`latentopt`] descends a
//! weighted energy over those predictions to propose binders for a site.
//! [`synthbench`] supplies a seeded synthetic world with planted binders so
//! every stage can be trained and checked end to end.

pub mod diffcore;
pub mod error;
pub mod evalkit;
pub mod latentopt;
pub mod pipeline;
pub mod predictors;
pub mod sitegraph;
pub mod synthbench;
pub mod training;

pub use error::{Error, Result};
