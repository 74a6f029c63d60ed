//! Multi-pathogen metapopulation SIR simulation and mobility-network
//! topology inference.
//!
//! The crate simulates SIR epidemics of several independent pathogens on a
//! shared mobility network, then reconstructs the hidden network and the
//! epidemic parameters from the daily new-case series alone, using an
//! encoder-decoder model trained by reverse-mode differentiation.

pub mod autodiff;
pub mod datasets;
pub mod epidemic;
pub mod error;
pub mod experiments;
pub mod graphgen;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod metrics;

pub use error::{Error, Result};
