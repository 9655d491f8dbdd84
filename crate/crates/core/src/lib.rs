//! Lossless text compression driven by a next-token predictor, and
//! entropy-rate upper-bound estimation from the same predictions.
//!
//! The pipeline is: tokenize the text, ask a [`Predictor`] for a
//! distribution over the next token, then hand the true token to one of
//! three codecs:
//!
//! * [`rank`]: the token's rank under the sorted distribution, serialized as
//!   varints and DEFLATE-compressed;
//! * [`tbyt`]: a fresh canonical prefix code per token with lengths
//!   `⌈log₂(1/q)⌉`;
//! * [`ac`]: a range coder fed the distribution directly.
//!
//! [`metrics`] turns the same predictions into `Ĥ_ub` and compression
//! ratios; [`pipeline`] wraps everything in a self-describing container.

pub mod ac;
pub mod bridge;
pub mod container;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod predictor;
pub mod rank;
pub mod tbyt;
pub mod token;

pub use error::{Error, Result};
pub use predictor::{AdaptivePredictor, Predictor, QuantizedPmf, StaticPredictor, PMF_TOTAL};
pub use token::{TokenId, TokenStream, Vocabulary};
