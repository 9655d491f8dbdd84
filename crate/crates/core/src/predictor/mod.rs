//! Next-token probability sources.
//!
//! Every predictor hands out a [`QuantizedPmf`]: `D` integer weights, each at
//! least one, summing to exactly [`PMF_TOTAL`]. Encoders and decoders call
//! [`Predictor::predict`] and then [`Predictor::update`] with the true token,
//! in the same order, so both sides see identical distributions.

mod adaptive;
mod quantize;

pub use adaptive::{AdaptivePredictor, MAX_ORDER};
pub use quantize::quantize_scores;

use crate::error::{Error, Result};
use crate::token::TokenId;

/// Total mass of every quantized distribution.
pub const PMF_TOTAL: u32 = 1 << 24;

/// Integer distribution over `[0, D)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedPmf {
    weights: Vec<u32>,
}

impl QuantizedPmf {
    /// Validates that every weight is at least one and that they sum to
    /// [`PMF_TOTAL`].
    pub fn new(weights: Vec<u32>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidPmf("empty weight vector".into()));
        }
        if let Some(t) = weights.iter().position(|&w| w == 0) {
            return Err(Error::InvalidPmf(format!("token {t} has zero weight")));
        }
        let sum: u64 = weights.iter().map(|&w| u64::from(w)).sum();
        if sum != u64::from(PMF_TOTAL) {
            return Err(Error::InvalidPmf(format!("weights sum to {sum}, expected {PMF_TOTAL}")));
        }
        Ok(Self { weights })
    }

    pub(crate) fn from_valid(weights: Vec<u32>) -> Self {
        debug_assert!(weights.iter().all(|&w| w >= 1));
        debug_assert_eq!(weights.iter().map(|&w| u64::from(w)).sum::<u64>(), u64::from(PMF_TOTAL));
        Self { weights }
    }

    pub fn uniform(vocab_size: usize) -> Result<Self> {
        quantize_scores(&vec![1; vocab_size])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[u32] {
        &self.weights
    }

    pub fn weight(&self, token: TokenId) -> u32 {
        self.weights[token as usize]
    }

    /// Cumulative interval `[lo, hi)` of `token` in token-id order.
    pub fn interval(&self, token: TokenId) -> (u32, u32) {
        let lo: u32 = self.weights[..token as usize].iter().sum();
        (lo, lo + self.weights[token as usize])
    }

    /// Token whose cumulative interval contains `target`, with its interval.
    pub fn lookup(&self, target: u32) -> Option<(TokenId, u32, u32)> {
        let mut lo = 0u32;
        for (t, &w) in self.weights.iter().enumerate() {
            if target < lo + w {
                return Some((t as TokenId, lo, lo + w));
            }
            lo += w;
        }
        None
    }

    /// `log₂(PMF_TOTAL / w(token))`
    pub fn information_bits(&self, token: TokenId) -> f64 {
        (f64::from(PMF_TOTAL) / f64::from(self.weight(token))).log2()
    }
}

/// A next-token model driven one epoch at a time.
pub trait Predictor {
    /// Vocabulary size `D`.
    fn vocab_size(&self) -> usize;

    /// Distribution for the next token. Calling this repeatedly without an
    /// intervening [`update`](Predictor::update) returns the same weights.
    fn predict(&mut self) -> Result<&QuantizedPmf>;

    /// Reports the token that actually occurred.
    fn update(&mut self, actual: TokenId) -> Result<()>;
}

impl<P: Predictor + ?Sized> Predictor for Box<P> {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn predict(&mut self) -> Result<&QuantizedPmf> {
        (**self).predict()
    }

    fn update(&mut self, actual: TokenId) -> Result<()> {
        (**self).update(actual)
    }
}

pub(crate) fn check_token(actual: TokenId, vocab_size: usize) -> Result<()> {
    if (actual as usize) < vocab_size {
        Ok(())
    } else {
        Err(Error::InvalidStream(format!(
            "token id {actual} outside vocabulary of {vocab_size}"
        )))
    }
}

/// Same distribution at every epoch. The uniform model is the special case
/// of all-equal scores.
#[derive(Debug, Clone)]
pub struct StaticPredictor {
    pmf: QuantizedPmf,
}

impl StaticPredictor {
    pub fn new(pmf: QuantizedPmf) -> Self {
        Self { pmf }
    }

    pub fn uniform(vocab_size: usize) -> Result<Self> {
        Ok(Self::new(QuantizedPmf::uniform(vocab_size)?))
    }
}

impl Predictor for StaticPredictor {
    fn vocab_size(&self) -> usize {
        self.pmf.len()
    }

    fn predict(&mut self) -> Result<&QuantizedPmf> {
        Ok(&self.pmf)
    }

    fn update(&mut self, actual: TokenId) -> Result<()> {
        check_token(actual, self.pmf.len())
    }
}
