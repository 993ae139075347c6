//! Few-shot semantic segmentation on a single-machine budget: multi-scale
//! similarity priors, word-embedding general prototypes, triplet-mined
//! region features and a small fusion decoder, trained with a hand-rolled
//! reverse-mode tape.

pub mod autodiff;
pub mod commands;
pub mod config;
pub mod episodes;
pub mod gim;
pub mod hpm;
pub mod error;
pub mod ifm;
pub mod io;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{BinaryMask, Tensor};
