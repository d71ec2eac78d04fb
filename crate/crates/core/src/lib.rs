//! Vision-language guided token pruning for a staged ViT segmenter.

pub mod backbone;
pub mod costmodel;
pub mod error;
pub mod layers;
pub mod maskdec;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod params;
pub mod pipeline;
pub mod prune;
pub mod rng;
pub mod synthdata;
pub mod viz;

pub use error::{Error, Result};
pub use numerics::{Tape, Tensor, Var};
