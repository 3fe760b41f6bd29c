//! Linear-complexity self-attention as a learnable graph filter in the
//! singular value domain, plus the spectral analysis and training machinery
//! needed to study it.
//!
//! Modules:
//! - [`tensor`]: dense f64 tensors with tape-based reverse-mode autodiff
//! - [`poly`]: monomial and Jacobi polynomial bases and filter evaluation
//! - [`attention`]: the quadratic softmax baseline and the linear AGF layer
//! - [`model`]: transformer blocks and the sequence classifier built on them
//! - [`spectral`]: DFT-based frequency analysis and filter-response probes
//! - [`training`]: objective, Adam, gradient checking, synthetic data, training loop
//! - [`prng`]: portable seeded randomness
//! - [`mat`]: plain row-major matrices for the analysis paths

pub mod attention;
pub mod mat;
pub mod model;
pub mod poly;
pub mod prng;
pub mod spectral;
pub mod tensor;
pub mod training;

pub use mat::Mat;
pub use poly::{BasisKind, BasisSpec, FilterCoefficients};
pub use prng::Prng;
pub use tensor::{Tape, TensorError, TensorId};
