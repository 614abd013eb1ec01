//! Learning a globally stable dynamical system from one demonstration.
//!
//! The pipeline has three stages:
//!
//! 1. [`spectral`] builds a quasi-linear latent trajectory in closed form from the
//!    smallest repeating eigenvalues of a multi-copy path-graph Laplacian.
//! 2. [`diffeo`] fits an invertible map from the (aligned) latent points to the
//!    demonstration as a composition of Gaussian kernel translations.
//! 3. [`dynamics`] integrates a linear contraction in latent space and pushes the
//!    states through the map, which makes the learned system stable by construction.
//!
//! [`demo`] generates and reads demonstrations, [`eval`] scores replications and
//! tunes the fit, and [`pipeline`] wires the stages together.

pub mod demo;
pub mod diffeo;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod spectral;

pub use demo::Demonstration;
pub use diffeo::{DiffeoLayer, DiffeoModel, FitParams, WidthPolicy};
pub use dynamics::{LatentDs, RolloutSettings, RolloutTrace};
pub use error::{Error, Result};
pub use eval::{DtwScore, TuningReport};
pub use spectral::{GraphSpec, LatentEmbedding, SpectralSelection};
