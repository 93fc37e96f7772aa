//! Multi-city next-location prediction.
//!
//! Locations are represented by their features (POI mix, normalized
//! coordinates, popularity rank) rather than by city-specific ids, so one
//! parameter set serves every city. A location tower (feature encoder plus a
//! deep & cross network) embeds all candidate locations of a city; a
//! trajectory tower (masked attention plus noisy top-k mixture-of-experts
//! blocks) turns a visit history into intent vectors; their inner products
//! score the next location.

pub mod autodiff;
pub mod config;
pub mod data;
mod error;
pub mod eval;
pub mod geo;
pub mod loctower;
pub mod model;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod train;
pub mod trajtower;

pub use error::{Error, Result};
