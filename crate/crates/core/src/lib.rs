//! Entity-aware neural machine translation on a synthetic world: extract
//! candidate translations for source entities, then let the decoder attend to
//! them as a prefix.

pub mod error;
pub mod eval;
pub mod extraction;
pub mod inference;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod training;
pub mod translit;
pub mod vocab;

pub use error::{Error, Result};
