//! The sentence-level transformer and its inputs.

pub mod checkpoint;
pub mod config;
pub mod decode;
pub mod input;
pub mod layers;
pub mod params;
pub mod transformer;

pub use config::{AttendSite, ModelConfig};
pub use decode::{DecoderState, EncoderState, StepOut};
pub use input::{DecoderInput, EncoderInput, Example, PosTable, Segment};
pub use params::ParamStore;
pub use transformer::{masked_cross_entropy, EmbedRow, Forward, Transformer};
