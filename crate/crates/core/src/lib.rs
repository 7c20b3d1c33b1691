//! Association mining between cell populations and candidate biomarker genes
//! in single-cell expression matrices.

pub mod analytics;
pub mod bench;
pub mod embedding;
pub mod error;
pub mod matrix;
pub mod miner;
pub mod neighbors;
pub mod verification;

pub use error::{Error, Result};
pub use matrix::{ExpressionMatrix, NormalizationMethod, NormalizationSpec};
