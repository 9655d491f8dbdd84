//! Range coder driven by time-varying [`QuantizedPmf`]s.
//!
//! The coder keeps a 64-bit `low` and a 64-bit `range` and shifts out a
//! byte whenever `range` drops below 2^48, so `range / PMF_TOTAL ≥ 2^24` and
//! the truncation loss per token is below `2^-24 / ln 2` bits. Carries are
//! propagated back into the bytes already written. The final flush writes
//! the fewest bytes that pin a value inside the last interval, so the
//! payload is within a few bits of `Σ log₂(PMF_TOTAL / wᵢ)`.
//!
//! The token count is not stored in the payload; the decoder is told how
//! many tokens to read.

use crate::error::{Error, Result};
use crate::predictor::{check_token, Predictor, QuantizedPmf, PMF_TOTAL};
use crate::token::TokenId;

const RANGE_BOTTOM: u64 = 1 << 48;

/// Number of flush bytes for a final range.
fn flush_len(range: u64) -> u32 {
    let bits = 63 - range.leading_zeros();
    (64 - bits).div_ceil(8)
}

#[derive(Debug, Clone)]
pub struct RangeEncoder {
    low: u64,
    range: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u64::MAX,
            out: Vec::new(),
        }
    }

    fn carry(&mut self) {
        for byte in self.out.iter_mut().rev() {
            let (next, overflow) = byte.overflowing_add(1);
            *byte = next;
            if !overflow {
                return;
            }
        }
        unreachable!("carry past the start of the stream");
    }

    fn add_low(&mut self, amount: u64) {
        let (low, overflow) = self.low.overflowing_add(amount);
        self.low = low;
        if overflow {
            self.carry();
        }
    }

    /// Narrows the interval to `[cum_lo, cum_lo + weight)` out of
    /// [`PMF_TOTAL`].
    pub fn encode_interval(&mut self, cum_lo: u32, weight: u32) {
        debug_assert!(weight >= 1 && cum_lo + weight <= PMF_TOTAL);
        let r = self.range / u64::from(PMF_TOTAL);
        self.add_low(u64::from(cum_lo) * r);
        self.range = u64::from(weight) * r;
        while self.range < RANGE_BOTTOM {
            self.out.push((self.low >> 56) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    pub fn encode(&mut self, pmf: &QuantizedPmf, token: TokenId) {
        let (lo, hi) = pmf.interval(token);
        self.encode_interval(lo, hi - lo);
    }

    pub fn bytes_written(&self) -> usize {
        self.out.len()
    }

    pub fn finish(mut self) -> Vec<u8> {
        let n = flush_len(self.range);
        let shift = 64 - 8 * n;
        let mask = if shift == 0 { 0 } else { (1u64 << shift) - 1 };
        let value = if self.low & mask == 0 {
            self.low
        } else {
            let rounded = self.low | mask;
            if rounded == u64::MAX {
                self.carry();
                0
            } else {
                rounded + 1
            }
        };
        for i in 0..n {
            self.out.push((value >> (56 - 8 * i)) as u8);
        }
        self.out
    }
}

#[derive(Debug, Clone)]
pub struct RangeDecoder<'a> {
    input: &'a [u8],
    pos: usize,
    code: u64,
    range: u64,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        let mut dec = Self {
            input,
            pos: 0,
            code: 0,
            range: u64::MAX,
        };
        for _ in 0..8 {
            dec.code = (dec.code << 8) | u64::from(dec.next_byte());
        }
        dec
    }

    /// Bytes past the end of the payload read as zero.
    fn next_byte(&mut self) -> u8 {
        let b = self.input.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    pub fn decode(&mut self, pmf: &QuantizedPmf) -> Result<TokenId> {
        let r = self.range / u64::from(PMF_TOTAL);
        let target = self.code / r;
        if target >= u64::from(PMF_TOTAL) {
            return Err(Error::corrupt("range decoder target outside the distribution"));
        }
        let (token, lo, hi) = pmf
            .lookup(target as u32)
            .expect("target below PMF_TOTAL always maps to a token");
        self.code -= u64::from(lo) * r;
        self.range = u64::from(hi - lo) * r;
        while self.range < RANGE_BOTTOM {
            self.code = (self.code << 8) | u64::from(self.next_byte());
            self.range <<= 8;
        }
        Ok(token)
    }

    /// Checks that the payload length is exactly what the encoder would have
    /// produced for the tokens decoded so far.
    pub fn finish(self) -> Result<()> {
        let expected = self.pos - 8 + flush_len(self.range) as usize;
        if expected != self.input.len() {
            return Err(Error::corrupt(format!(
                "range coder payload has {} bytes, expected {expected}",
                self.input.len()
            )));
        }
        Ok(())
    }
}

pub fn ac_encode<P: Predictor + ?Sized>(tokens: &[TokenId], predictor: &mut P) -> Result<Vec<u8>> {
    let mut enc = RangeEncoder::new();
    for &token in tokens {
        check_token(token, predictor.vocab_size())?;
        enc.encode(predictor.predict()?, token);
        predictor.update(token)?;
    }
    Ok(enc.finish())
}

pub fn ac_decode<P: Predictor + ?Sized>(
    payload: &[u8],
    n_tokens: u64,
    predictor: &mut P,
) -> Result<Vec<TokenId>> {
    let mut dec = RangeDecoder::new(payload);
    let mut tokens = Vec::with_capacity(n_tokens.min(1 << 24) as usize);
    for _ in 0..n_tokens {
        let token = dec.decode(predictor.predict()?)?;
        predictor.update(token)?;
        tokens.push(token);
    }
    dec.finish()?;
    Ok(tokens)
}
