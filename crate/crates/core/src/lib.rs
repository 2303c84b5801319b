//! Cyclic-consistency video object segmentation at desk scale.
//!
//! A small dense tensor engine with reverse-mode autodiff, a key-value
//! memory-matching segmentation network, cyclic training, gradient-corrected
//! inference, cycle-ERF receptive-field analysis, a synthetic moving-shapes
//! benchmark, and DAVIS-style J/F evaluation.

pub mod error;
pub mod erf;
pub mod gradcheck;
pub mod infer;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod par;
pub mod scalar;
pub mod segnet;
pub mod seqio;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{CoreError, Result};
pub use mask::Mask;
pub use model::{ModelConfig, Weights};
pub use scalar::Scalar;
pub use tape::{Tape, TensorId};
pub use tensor::Tensor;
