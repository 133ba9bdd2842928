//! Training framework for a miniature query-based instance segmenter with
//! inter-scene query discrimination and transformation-equivariance losses.

pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod float;
pub mod gradcheck;
pub mod mask;
pub mod matching;
pub mod memory;
pub mod objectives;
pub mod oracle;
pub mod resample;
pub mod scene;
pub mod segmenter;
pub mod tensor;
pub mod trainer;
pub mod transform;
pub mod verify;

pub use error::{Error, Result};
pub use float::Float;
pub use tensor::Tensor;
