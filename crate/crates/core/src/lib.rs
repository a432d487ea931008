//! Online sequence models for human-object interaction: selective state-space
//! blocks, short/long-term frame memory, a conditional motion diffusion model,
//! a point 4D perception network, evaluation metrics and synthetic data.

pub mod archive;
pub mod autograd;
pub mod diffusion;
pub mod error;
pub mod memory;
pub mod metrics;
pub mod nn;
pub mod percept;
pub mod seq;
pub mod ssm;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Mat;
