//! Truncated Euler-Maruyama integration for SDEs `dX = b(X) dt + σ dB`
//! whose drift is only contractive at infinity, together with a one-step
//! mixed (stick / reflect / synchronous) coupling, the concave distance
//! function that turns it into a contraction, and empirical diagnostics
//! for invariant measures.

pub mod calibrate;
pub mod cli;
pub mod config;
pub mod coupling;
pub mod distfn;
pub mod error;
pub mod logpos;
pub mod measure;
pub mod model;
pub mod quad;
pub mod rng;
pub mod scheme;
pub mod suite;

pub use error::{Error, Result};
pub use logpos::LogPositive;
