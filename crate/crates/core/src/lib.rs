//! Generative model pairing a compression encoder (global code `z`) with a
//! conditional invertible flow decoder (local code `υ`) and a flow prior.

pub mod config;
pub mod encoder;
pub mod error;
pub mod flows;
pub mod image;
pub mod model;
pub mod numerics;
pub mod prior;
pub mod probe;
pub mod training;

pub use error::{Error, Result};
