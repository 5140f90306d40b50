//! Change detection with selective state space models, from scratch:
//! a tape-based autograd tensor engine, the S6 scan kernels (1D and
//! four-direction 2D), a Siamese encoder, a joint-scan difference module,
//! a channel-attentive decoder, plus datasets, metrics, training and
//! analysis tooling. Everything runs on CPU in f32, with an f64 mode for
//! gradient verification.

pub mod blocks;
pub mod decoder;
pub mod diff;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod scalar;
pub mod ssm;
pub mod tensor;

pub use error::{McdError, Result};
pub use params::{ParamId, ParamStore};
pub use scalar::{Dtype, Scalar};
pub use tensor::{Graph, Tensor, UnaryKind, UpsampleMode};
