//! Mixture-of-diffusion toy backbone.
//!
//! Discrete masked diffusion for token sequences and rectified flow for
//! continuous latents share one attention stack. Attention is full inside a
//! modality block and causal across blocks, so conditioning blocks form a
//! cacheable prefix for blockwise, variable-length decoding.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod flow;
pub mod gradcheck;
pub mod layout;
pub mod length;
pub mod mdm;
pub mod model;
pub mod report;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub use vocab::Vocab;
