//! Contextual Conformer-Transducer ASR at desk scale: dense f64 math with
//! tape-based reverse-mode differentiation, streaming attention masks,
//! cross-utterance context fusion, and an utterance-splicing batch scheduler.

pub mod checkpoint;
pub mod config;
pub mod conformer;
pub mod error;
pub mod features;
pub mod fusion;
pub mod gradcheck;
pub mod masks;
pub mod params;
pub mod scheduler;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod transducer;

pub use error::{Error, Result};
pub use tensor::Tensor;
