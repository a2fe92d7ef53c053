//! Latent-space PDE surrogates that evolve a state latent and an uncertainty
//! latent side by side, with a pseudo-spectral Navier–Stokes data generator,
//! calibration metrics and latent-space inverse optimization.

pub mod error;
pub mod inverse_opt;
pub mod model;
pub mod pde;
pub mod seed;
pub mod tensor;
pub mod training;
pub mod uq_eval;

pub use error::{Error, Result};
