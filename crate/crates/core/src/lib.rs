//! Semi-supervised cardiac segmentation with disentangled anatomy and
//! modality factors, regularised by a temporal transformer that predicts
//! future anatomy from the current one.

pub mod data;
pub mod evaluation;
pub mod networks;
pub mod objectives;
pub mod training;
mod error;

pub use error::{Error, Result};
