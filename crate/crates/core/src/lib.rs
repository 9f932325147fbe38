//! Additive quantization of linear-layer weights with Hessian-aware
//! codebook initialisation, beam-search code assignment and exact oracles.

pub mod analysis;
pub mod beam;
pub mod error;
pub mod hessian;
pub mod initkm;
pub mod oaem;
pub mod pipeline;
pub mod pvtoy;
pub mod quantcore;
pub mod synth;
pub mod tensor_io;

pub use error::{Error, Result};
pub use hessian::{build_hessian_bank, HessianBank};
pub use pipeline::{initialise, initialise_and_quantize, InitKind, InitSettings};
pub use quantcore::{CodeMatrix, CodebookSet, GroupLayout, Groups, LayerProblem};
pub use tensor_io::{DenseMatrix, QuantizedArtifact};
