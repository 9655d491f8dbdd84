//! `LMZ1` container: a fixed little-endian header followed by the codec
//! payload.
//!
//! ```text
//! magic        4   "LMZ1"
//! version      u16
//! codec        u8  0 = rank+deflate, 1 = tbyt, 2 = ac
//! codec level  u8  deflate level for codec 0, otherwise 0
//! tokenizer    u8  0 = byte, 1 = vocab, 2 = external
//! digest       32  sha256 of the vocabulary (or of the model tag)
//! predictor    u8  0 = uniform, 1 = adaptive, 2 = external
//! memory       u32
//! order        u8
//! tag length   u16
//! tag          ..  UTF-8 model identifier, empty unless external
//! n_tokens     u64
//! n_chars      u64
//! payload len  u64
//! padding      u8  zero bits in the last payload byte (tbyt only)
//! crc32        u32 of the original text
//! payload      ..
//! ```

use std::fmt;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"LMZ1";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum CodecId {
    Rank = 0,
    Tbyt = 1,
    Ac = 2,
}

impl CodecId {
    pub const ALL: [CodecId; 3] = [CodecId::Rank, CodecId::Tbyt, CodecId::Ac];

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Self::Rank),
            1 => Ok(Self::Tbyt),
            2 => Ok(Self::Ac),
            _ => Err(Error::corrupt(format!("unknown codec id {v}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Rank => "rank",
            Self::Tbyt => "tbyt",
            Self::Ac => "ac",
        }
    }
}

impl fmt::Display for CodecId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum TokenizerId {
    Byte = 0,
    Vocab = 1,
    External = 2,
}

impl TokenizerId {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Self::Byte),
            1 => Ok(Self::Vocab),
            2 => Ok(Self::External),
            _ => Err(Error::corrupt(format!("unknown tokenizer id {v}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum PredictorId {
    Uniform = 0,
    Adaptive = 1,
    External = 2,
}

impl PredictorId {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Self::Uniform),
            1 => Ok(Self::Adaptive),
            2 => Ok(Self::External),
            _ => Err(Error::corrupt(format!("unknown predictor id {v}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContainerHeader {
    pub format_version: u16,
    pub codec: CodecId,
    pub codec_level: u8,
    pub tokenizer: TokenizerId,
    pub vocab_digest: [u8; 32],
    pub predictor: PredictorId,
    pub memory: u32,
    pub order: u8,
    pub model_tag: String,
    pub n_tokens: u64,
    pub n_chars: u64,
    pub payload_len: u64,
    pub padding_bits: u8,
    pub crc32: u32,
}

impl ContainerHeader {
    /// Serialized size in bytes.
    pub fn encoded_len(&self) -> usize {
        4 + 2 + 1 + 1 + 1 + 32 + 1 + 4 + 1 + 2 + self.model_tag.len() + 8 + 8 + 8 + 1 + 4
    }

    pub fn write(&self, out: &mut Vec<u8>) -> Result<()> {
        let tag_len = u16::try_from(self.model_tag.len())
            .map_err(|_| Error::Config("model tag longer than 65535 bytes".into()))?;
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.push(self.codec as u8);
        out.push(self.codec_level);
        out.push(self.tokenizer as u8);
        out.extend_from_slice(&self.vocab_digest);
        out.push(self.predictor as u8);
        out.extend_from_slice(&self.memory.to_le_bytes());
        out.push(self.order);
        out.extend_from_slice(&tag_len.to_le_bytes());
        out.extend_from_slice(self.model_tag.as_bytes());
        out.extend_from_slice(&self.n_tokens.to_le_bytes());
        out.extend_from_slice(&self.n_chars.to_le_bytes());
        out.extend_from_slice(&self.payload_len.to_le_bytes());
        out.push(self.padding_bits);
        out.extend_from_slice(&self.crc32.to_le_bytes());
        Ok(())
    }

    /// Parses a header and returns it with the remaining bytes. Magic and
    /// version are checked before anything else is read.
    pub fn read(input: &[u8]) -> Result<(Self, &[u8])> {
        let mut r = Reader(input);
        if r.take(4)? != MAGIC {
            return Err(Error::corrupt("not an LMZ1 container"));
        }
        let format_version = r.u16()?;
        if format_version != FORMAT_VERSION {
            return Err(Error::corrupt(format!(
                "unsupported container version {format_version}"
            )));
        }
        let codec = CodecId::from_u8(r.u8()?)?;
        let codec_level = r.u8()?;
        let tokenizer = TokenizerId::from_u8(r.u8()?)?;
        let vocab_digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let predictor = PredictorId::from_u8(r.u8()?)?;
        let memory = r.u32()?;
        let order = r.u8()?;
        let tag_len = r.u16()? as usize;
        let model_tag = String::from_utf8(r.take(tag_len)?.to_vec())
            .map_err(|_| Error::corrupt("model tag is not UTF-8"))?;
        let header = Self {
            format_version,
            codec,
            codec_level,
            tokenizer,
            vocab_digest,
            predictor,
            memory,
            order,
            model_tag,
            n_tokens: r.u64()?,
            n_chars: r.u64()?,
            payload_len: r.u64()?,
            padding_bits: r.u8()?,
            crc32: r.u32()?,
        };
        Ok((header, r.0))
    }
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.0.len() < n {
            return Err(Error::corrupt("container header truncated"));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Header plus payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Container {
    pub header: ContainerHeader,
    pub payload: Vec<u8>,
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        debug_assert_eq!(self.header.payload_len, self.payload.len() as u64);
        let mut out = Vec::with_capacity(self.header.encoded_len() + self.payload.len());
        self.header.write(&mut out)?;
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, rest) = ContainerHeader::read(bytes)?;
        if rest.len() as u64 != header.payload_len {
            return Err(Error::corrupt(format!(
                "payload has {} bytes, header declares {}",
                rest.len(),
                header.payload_len
            )));
        }
        Ok(Self {
            header,
            payload: rest.to_vec(),
        })
    }
}
