//! Token-by-token prefix coding.
//!
//! Each epoch builds a canonical prefix code over the whole vocabulary with
//! codeword lengths `⌈log₂(PMF_TOTAL / w)⌉` (at least one bit) and emits the
//! codeword of the true token. The lengths satisfy Kraft's inequality because
//! `2^-⌈log₂(T/w)⌉ ≤ w/T`.

use crate::error::{Error, Result};
use crate::predictor::{Predictor, QuantizedPmf, PMF_TOTAL};
use crate::token::TokenId;

/// `⌈log₂(total / weight)⌉`, in integer arithmetic.
pub fn code_length(weight: u32, total: u32) -> Result<u32> {
    if weight == 0 || weight > total {
        return Err(Error::InvalidPmf(format!(
            "weight {weight} outside [1, {total}]"
        )));
    }
    let shift = weight.leading_zeros() - total.leading_zeros();
    Ok(if u64::from(weight) << shift >= u64::from(total) {
        shift
    } else {
        shift + 1
    })
}

/// Canonical prefix code for one epoch: codewords assigned in
/// (length, token id) order.
#[derive(Debug, Clone)]
pub struct CanonicalCode {
    lengths: Vec<u8>,
    codes: Vec<u32>,
    first: Vec<u32>,
    count: Vec<u32>,
}

impl CanonicalCode {
    pub fn new(pmf: &QuantizedPmf) -> Self {
        let lengths: Vec<u8> = pmf
            .weights()
            .iter()
            .map(|&w| code_length(w, PMF_TOTAL).expect("valid pmf").max(1) as u8)
            .collect();
        let max_len = lengths.iter().copied().max().unwrap_or(1) as usize;
        let mut count = vec![0u32; max_len + 1];
        for &l in &lengths {
            count[l as usize] += 1;
        }
        let mut first = vec![0u32; max_len + 1];
        let mut code = 0u32;
        for l in 1..=max_len {
            code = (code + count[l - 1]) << 1;
            first[l] = code;
        }
        let mut next = first.clone();
        let codes = lengths
            .iter()
            .map(|&l| {
                let c = next[l as usize];
                next[l as usize] += 1;
                c
            })
            .collect();
        Self {
            lengths,
            codes,
            first,
            count,
        }
    }

    /// `(codeword, length in bits)` of `token`.
    pub fn codeword(&self, token: TokenId) -> (u32, u8) {
        (self.codes[token as usize], self.lengths[token as usize])
    }

    pub fn lengths(&self) -> &[u8] {
        &self.lengths
    }

    /// `Σ 2^(L − l_t)` for `L` the longest length; Kraft holds iff this is
    /// at most `2^L`.
    pub fn kraft_numerator(&self) -> (u128, u32) {
        let max_len = self.first.len() as u32 - 1;
        let sum = self
            .lengths
            .iter()
            .map(|&l| 1u128 << (max_len - u32::from(l)))
            .sum();
        (sum, max_len)
    }

    /// Reads one codeword, pulling bits from `next_bit`.
    fn decode(&self, mut next_bit: impl FnMut() -> Option<u32>) -> Result<TokenId> {
        let mut code = 0u32;
        for l in 1..self.first.len() {
            let bit = next_bit().ok_or_else(|| Error::corrupt("bits exhausted mid-codeword"))?;
            code = (code << 1) | bit;
            if code >= self.first[l] && code - self.first[l] < self.count[l] {
                let t = self
                    .lengths
                    .iter()
                    .zip(&self.codes)
                    .position(|(&len, &c)| len as usize == l && c == code)
                    .expect("canonical code covers every assigned codeword");
                return Ok(t as TokenId);
            }
        }
        Err(Error::corrupt("no codeword matches"))
    }
}

/// Per-token code lengths for one stream.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CodeLengthProfile {
    /// `⌈log₂(PMF_TOTAL / w_i)⌉` per token, unclamped.
    pub lengths: Vec<u8>,
    /// Sum of `lengths`.
    pub total_bits: u64,
    /// Bits actually written, where a zero length is emitted as one bit.
    pub emitted_bits: u64,
}

#[derive(Debug, Clone)]
pub struct TbytOutput {
    pub payload: Vec<u8>,
    /// Zero bits appended to fill the final byte.
    pub padding_bits: u8,
    pub profile: CodeLengthProfile,
}

/// MSB-first bit packer.
#[derive(Debug, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    acc: u64,
    filled: u32,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn write(&mut self, value: u32, bits: u32) {
        debug_assert!(bits <= 32);
        self.acc = (self.acc << bits) | u64::from(value) & ((1u64 << bits) - 1);
        self.filled += bits;
        while self.filled >= 8 {
            self.filled -= 8;
            self.bytes.push((self.acc >> self.filled) as u8);
        }
        self.acc &= (1u64 << self.filled) - 1;
    }

    /// Pads with zero bits; returns the bytes and the padding length.
    pub fn finish(mut self) -> (Vec<u8>, u8) {
        let pad = (8 - self.filled % 8) % 8;
        if pad > 0 {
            self.write(0, pad);
        }
        (self.bytes, pad as u8)
    }
}

pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: u64,
    limit: u64,
}

impl<'a> BitReader<'a> {
    /// Reads `bytes` minus `padding_bits` trailing bits.
    pub fn new(bytes: &'a [u8], padding_bits: u8) -> Self {
        let limit = (bytes.len() as u64 * 8).saturating_sub(u64::from(padding_bits));
        Self {
            bytes,
            pos: 0,
            limit,
        }
    }

    pub fn read_bit(&mut self) -> Option<u32> {
        if self.pos >= self.limit {
            return None;
        }
        let byte = self.bytes[(self.pos / 8) as usize];
        let bit = (byte >> (7 - self.pos % 8)) & 1;
        self.pos += 1;
        Some(u32::from(bit))
    }

    pub fn remaining(&self) -> u64 {
        self.limit - self.pos
    }
}

/// Incremental encoder, one token per call.
#[derive(Debug, Default)]
pub struct TbytEncoder {
    bits: BitWriter,
    profile: CodeLengthProfile,
}

impl TbytEncoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn encode(&mut self, pmf: &QuantizedPmf, token: TokenId) -> Result<()> {
        let accounted = code_length(pmf.weight(token), PMF_TOTAL)?;
        let code = CanonicalCode::new(pmf);
        let (word, len) = code.codeword(token);
        self.bits.write(word, u32::from(len));
        self.profile.lengths.push(accounted as u8);
        self.profile.total_bits += u64::from(accounted);
        self.profile.emitted_bits += u64::from(len);
        Ok(())
    }

    pub fn finish(self) -> TbytOutput {
        let (payload, padding_bits) = self.bits.finish();
        TbytOutput {
            payload,
            padding_bits,
            profile: self.profile,
        }
    }
}

pub fn tbyt_encode<P: Predictor + ?Sized>(tokens: &[TokenId], predictor: &mut P) -> Result<TbytOutput> {
    let mut enc = TbytEncoder::new();
    for &token in tokens {
        crate::predictor::check_token(token, predictor.vocab_size())?;
        enc.encode(predictor.predict()?, token)?;
        predictor.update(token)?;
    }
    Ok(enc.finish())
}

pub fn tbyt_decode<P: Predictor + ?Sized>(
    payload: &[u8],
    padding_bits: u8,
    n_tokens: u64,
    predictor: &mut P,
) -> Result<Vec<TokenId>> {
    if padding_bits > 7 {
        return Err(Error::corrupt(format!("padding of {padding_bits} bits")));
    }
    let mut reader = BitReader::new(payload, padding_bits);
    let mut tokens = Vec::with_capacity(n_tokens.min(1 << 24) as usize);
    for _ in 0..n_tokens {
        let code = CanonicalCode::new(predictor.predict()?);
        let token = code.decode(|| reader.read_bit())?;
        predictor.update(token)?;
        tokens.push(token);
    }
    if reader.remaining() != 0 {
        return Err(Error::corrupt(format!(
            "{} unread bits after the last token",
            reader.remaining()
        )));
    }
    Ok(tokens)
}
