//! Residual-expansion post-training quantization.
//!
//! A trained network's weights (and optionally its activations) are expanded
//! into sums of quantized residues. The crate covers the whole pipeline:
//!
//! - [`model`]: the on-disk container and a seeded synthetic model generator
//! - [`quant`]: the symmetric quantization operator, the operator registry and
//!   the outlier-splitting binary residue
//! - [`expansion`]: dense and group-sparse residual expansion, budget
//!   allocation and input expansion
//! - [`inference`]: float, float-simulated and integer-only engines
//! - [`bounds`]: analytic error bounds and their empirical counterpart
//! - [`cost`]: the bit-operations model and the trade-off sweep
//! - [`cli`]: the `rex` command-line front end

pub mod bounds;
pub mod cli;
pub mod cost;
pub mod error;
pub mod expansion;
pub mod inference;
pub mod model;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
