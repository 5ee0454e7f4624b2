//! Token-merging vision-to-language connector, temporal token
//! contextualizing, a single-loss captioning trainer, and an analytical
//! MACs cost model, all on a minimal f64 autodiff core.

pub mod captioner;
pub mod checkpoint;
pub mod connector;
pub mod costmodel;
pub mod datagen;
pub mod decoder;
pub mod error;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod temporal;
pub mod tokmerge;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{backward, finite_diff_check, Tape, Tensor};
