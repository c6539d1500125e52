//! Multi-kernel Kronecker weight adaptation with channel-wise re-scaling.
//!
//! A frozen linear layer `W₀` is adapted by `ΔW = Σᵢ cᵢ ⊗ (aᵢ bᵢ)` and its
//! output re-scaled as `(1 + s1) ⊙ z + s2`. Both pieces merge back into a
//! single affine layer after training.

pub mod adapter;
pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod format;
pub mod kron;
pub mod numerics;
pub mod rescale;
pub mod training;
pub mod verify;

pub use adapter::{AdaptedLinear, AdapterShape, KarstAdapter, KronKernel, MergedLinear};
pub use error::{KarstError, Result};
pub use kron::KronPair;
pub use numerics::{DenseMatrix, DenseVector, SeededRng};
pub use rescale::RescaleParams;
