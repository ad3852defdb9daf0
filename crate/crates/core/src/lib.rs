//! Adaptive rounding for post-training weight quantization with a
//! codebook-reparameterized rounding matrix.
//!
//! Pipeline: per-row affine grid ([`quant`]), Hessian-aware residual
//! initialization ([`hessian`]), k-means codebook over the latent rounding
//! matrix ([`reparam`]), then blockwise or end-to-end codebook optimization
//! ([`optim`]). [`analysis`] checks the error-propagation properties of the
//! rectified sigmoid and produces comparison reports.

pub mod analysis;
pub mod error;
pub mod hessian;
pub mod io;
pub mod linalg;
pub mod optim;
pub mod quant;
pub mod reparam;
pub mod tensor;

pub use error::{Error, ErrorKind, Result};
pub use tensor::Tensor2D;
