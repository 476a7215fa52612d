//! Importance sampling of rare-event path functionals of metastable
//! overdamped Langevin dynamics with learned controls.

pub mod controls;
pub mod dynamics;
pub mod error;
pub mod estimator;
pub mod hjb;
pub mod metadynamics;
pub mod potential;
pub mod rng;
pub mod soc;

pub use error::{Error, Result};
