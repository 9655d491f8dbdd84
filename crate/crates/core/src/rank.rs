//! Rank transform and the ranks-then-DEFLATE codec.
//!
//! At each epoch the true token is replaced by its position in the
//! predicted distribution sorted by descending weight, ties broken by
//! ascending token id. A good predictor yields mostly zeros, which the
//! varint + DEFLATE serialization compresses well.

use std::io::{Read, Write};

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::predictor::{Predictor, QuantizedPmf};
use crate::token::TokenId;

/// DEFLATE level used for rank payloads.
pub const DEFLATE_LEVEL: u32 = 9;

/// Tokens listed from rank 0 (most probable) to rank `D − 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankPermutation {
    order: Vec<TokenId>,
}

impl RankPermutation {
    pub fn order(&self) -> &[TokenId] {
        &self.order
    }

    pub fn token_at(&self, rank: u32) -> Option<TokenId> {
        self.order.get(rank as usize).copied()
    }

    /// The inverse map: `ranks()[token]` is that token's rank.
    pub fn ranks(&self) -> Vec<u32> {
        let mut ranks = vec![0; self.order.len()];
        for (r, &t) in self.order.iter().enumerate() {
            ranks[t as usize] = r as u32;
        }
        ranks
    }
}

pub fn rank_permutation(pmf: &QuantizedPmf) -> RankPermutation {
    let w = pmf.weights();
    let mut order: Vec<TokenId> = (0..w.len() as TokenId).collect();
    // Stable sort keeps equal weights in ascending id order.
    order.sort_by(|&a, &b| w[b as usize].cmp(&w[a as usize]));
    RankPermutation { order }
}

/// Rank of `token` without building the full permutation.
pub fn rank_of(pmf: &QuantizedPmf, token: TokenId) -> u32 {
    let w = pmf.weights();
    let target = w[token as usize];
    let mut rank = 0;
    for (t, &x) in w.iter().enumerate() {
        if x > target || (x == target && (t as TokenId) < token) {
            rank += 1;
        }
    }
    rank
}

/// Token at `rank` without sorting the whole distribution.
pub fn token_at_rank(pmf: &QuantizedPmf, rank: u32) -> Option<TokenId> {
    let w = pmf.weights();
    if rank as usize >= w.len() {
        return None;
    }
    let mut order: Vec<TokenId> = (0..w.len() as TokenId).collect();
    let (_, &mut token, _) = order.select_nth_unstable_by(rank as usize, |&a, &b| {
        w[b as usize].cmp(&w[a as usize]).then(a.cmp(&b))
    });
    Some(token)
}

/// Rank sequence of `tokens` under a fresh predictor.
pub fn to_ranks<P: Predictor + ?Sized>(tokens: &[TokenId], predictor: &mut P) -> Result<Vec<u32>> {
    let mut ranks = Vec::with_capacity(tokens.len());
    for &token in tokens {
        let pmf = predictor.predict()?;
        if token as usize >= pmf.len() {
            return Err(Error::InvalidStream(format!(
                "token id {token} outside vocabulary of {}",
                pmf.len()
            )));
        }
        ranks.push(rank_of(pmf, token));
        predictor.update(token)?;
    }
    Ok(ranks)
}

/// Inverse of [`to_ranks`] given an identically configured predictor.
pub fn from_ranks<P: Predictor + ?Sized>(ranks: &[u32], predictor: &mut P) -> Result<Vec<TokenId>> {
    let mut tokens = Vec::with_capacity(ranks.len());
    for (i, &rank) in ranks.iter().enumerate() {
        let pmf = predictor.predict()?;
        let token = token_at_rank(pmf, rank).ok_or_else(|| {
            Error::corrupt(format!("rank {rank} at epoch {i} exceeds vocabulary of {}", pmf.len()))
        })?;
        predictor.update(token)?;
        tokens.push(token);
    }
    Ok(tokens)
}

pub fn write_varint(out: &mut Vec<u8>, mut value: u64) {
    while value >= 0x80 {
        out.push((value as u8) | 0x80);
        value >>= 7;
    }
    out.push(value as u8);
}

/// Reads one varint from the front of `input`, advancing it.
pub fn read_varint(input: &mut &[u8]) -> Result<u64> {
    let mut value = 0u64;
    for shift in (0..64).step_by(7) {
        let (&byte, rest) = input
            .split_first()
            .ok_or_else(|| Error::corrupt("truncated varint"))?;
        *input = rest;
        let bits = u64::from(byte & 0x7f);
        if shift == 63 && bits > 1 {
            return Err(Error::corrupt("varint overflows 64 bits"));
        }
        value |= bits << shift;
        if byte & 0x80 == 0 {
            return Ok(value);
        }
    }
    Err(Error::corrupt("varint longer than 10 bytes"))
}

/// Little-endian base-128 varints under a raw DEFLATE stream.
pub fn encode_ranks(ranks: &[u32]) -> Vec<u8> {
    let mut raw = Vec::with_capacity(ranks.len());
    for &r in ranks {
        write_varint(&mut raw, u64::from(r));
    }
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::new(DEFLATE_LEVEL));
    enc.write_all(&raw).expect("writing to a Vec cannot fail");
    enc.finish().expect("writing to a Vec cannot fail")
}

pub fn decode_ranks(payload: &[u8]) -> Result<Vec<u32>> {
    let mut raw = Vec::new();
    DeflateDecoder::new(payload)
        .read_to_end(&mut raw)
        .map_err(|e| Error::corrupt(format!("deflate: {e}")))?;
    let mut input = &raw[..];
    let mut ranks = Vec::new();
    while !input.is_empty() {
        let r = read_varint(&mut input)?;
        ranks.push(u32::try_from(r).map_err(|_| Error::corrupt("rank exceeds 32 bits"))?);
    }
    Ok(ranks)
}

/// Standalone DEFLATE of arbitrary bytes at [`DEFLATE_LEVEL`].
pub fn deflate_bytes(data: &[u8]) -> Vec<u8> {
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::new(DEFLATE_LEVEL));
    enc.write_all(data).expect("writing to a Vec cannot fail");
    enc.finish().expect("writing to a Vec cannot fail")
}
