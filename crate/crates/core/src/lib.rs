#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod dataio;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod processor;
pub mod rom;
pub mod scalar;
pub mod spectral;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision instantiations.
pub mod f32 {
    pub type RomCheckpoint = crate::rom::RomCheckpoint<f32>;
    pub type ProcessorCheckpoint = crate::processor::ProcessorCheckpoint<f32>;
    pub type Backbone = crate::backbone::Backbone<f32>;
    pub type LatentSequence = crate::rom::LatentSequence<f32>;
}

/// Double-precision instantiations.
pub mod f64 {
    pub type RomCheckpoint = crate::rom::RomCheckpoint<f64>;
    pub type ProcessorCheckpoint = crate::processor::ProcessorCheckpoint<f64>;
    pub type Backbone = crate::backbone::Backbone<f64>;
    pub type LatentSequence = crate::rom::LatentSequence<f64>;
}
