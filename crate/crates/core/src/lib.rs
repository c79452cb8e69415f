//! Diffusion-generated channels and a return-conditioned decision
//! transformer for IRS phase-shift control.

pub mod channel;
pub mod collect;
pub mod config;
pub mod diffusion;
pub mod dt;
pub mod error;
pub mod expert;
pub mod metrics;
pub mod pipeline;
pub mod trajectory;

pub use error::{D2tError, Result};
