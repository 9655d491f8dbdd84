//! Tokenizers and character accounting.
//!
//! A [`Vocabulary`] maps token ids in `[0, D)` to non-empty byte strings and
//! always contains every single-byte string, so any input can be tokenized.
//! Tokenization is greedy longest-match, left to right. Characters are bytes.

use std::collections::HashMap;
use std::fmt::Write as _;

use num_rational::Ratio;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Token id to byte-string table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    entries: Vec<Box<[u8]>>,
    index: HashMap<Box<[u8]>, TokenId>,
    max_token_bytes: usize,
}

impl Vocabulary {
    /// The 256-entry byte vocabulary; token id `b` is the byte `b`.
    pub fn bytes() -> Self {
        let entries = (0..=255u8).map(|b| vec![b]).collect();
        Self::new(entries).expect("byte vocabulary is valid")
    }

    /// Builds a vocabulary whose bound `B̄` is the longest entry.
    pub fn new(entries: Vec<Vec<u8>>) -> Result<Self> {
        let max = entries.iter().map(Vec::len).max().unwrap_or(0);
        Self::with_max_token_bytes(entries, max)
    }

    pub fn with_max_token_bytes(entries: Vec<Vec<u8>>, max_token_bytes: usize) -> Result<Self> {
        if entries.len() > u32::MAX as usize {
            return Err(Error::InvalidVocabulary("too many entries".into()));
        }
        let mut index = HashMap::with_capacity(entries.len());
        let mut boxed = Vec::with_capacity(entries.len());
        for (id, entry) in entries.into_iter().enumerate() {
            if entry.is_empty() {
                return Err(Error::InvalidVocabulary(format!("entry {id} is empty")));
            }
            if entry.len() > max_token_bytes {
                return Err(Error::InvalidVocabulary(format!(
                    "entry {id} has {} bytes, bound is {max_token_bytes}",
                    entry.len()
                )));
            }
            let entry = entry.into_boxed_slice();
            if index.insert(entry.clone(), id as TokenId).is_some() {
                return Err(Error::InvalidVocabulary(format!(
                    "entry {id} duplicates an earlier entry"
                )));
            }
            boxed.push(entry);
        }
        if let Some(b) = (0..=255u8).find(|b| !index.contains_key(&[*b][..])) {
            return Err(Error::InvalidVocabulary(format!(
                "single byte 0x{b:02x} is missing"
            )));
        }
        Ok(Self {
            entries: boxed,
            index,
            max_token_bytes,
        })
    }

    /// Byte vocabulary extended with the given multi-byte entries, in order.
    pub fn bytes_plus<I, T>(extra: I) -> Result<Self>
    where
        I: IntoIterator<Item = T>,
        T: AsRef<[u8]>,
    {
        let mut entries: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        entries.extend(extra.into_iter().map(|e| e.as_ref().to_vec()));
        Self::new(entries)
    }

    /// Number of tokens `D`.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_token_bytes(&self) -> usize {
        self.max_token_bytes
    }

    pub fn entry(&self, id: TokenId) -> Option<&[u8]> {
        self.entries.get(id as usize).map(|e| &e[..])
    }

    pub fn id_of(&self, bytes: &[u8]) -> Option<TokenId> {
        self.index.get(bytes).copied()
    }

    /// True for the plain 256-entry byte vocabulary.
    pub fn is_byte_vocabulary(&self) -> bool {
        self.entries.len() == 256 && self.entries.iter().enumerate().all(|(i, e)| e[..] == [i as u8])
    }

    /// Serializes as a header line `"D B̄"` followed by one escaped entry per
    /// line. Printable ASCII other than `\` is literal; everything else is
    /// written as `\xHH`.
    pub fn to_file_string(&self) -> String {
        let mut out = format!("{} {}\n", self.entries.len(), self.max_token_bytes);
        for entry in &self.entries {
            for &b in entry.iter() {
                if (0x21..=0x7e).contains(&b) && b != b'\\' {
                    out.push(b as char);
                } else {
                    let _ = write!(out, "\\x{b:02x}");
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::InvalidVocabulary(msg);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("missing header line".into()))?;
        let mut fields = header.split_ascii_whitespace();
        let (count, bound) = match (fields.next(), fields.next(), fields.next()) {
            (Some(d), Some(b), None) => (
                d.parse::<usize>().map_err(|e| bad(format!("bad D: {e}")))?,
                b.parse::<usize>().map_err(|e| bad(format!("bad bound: {e}")))?,
            ),
            _ => return Err(bad(format!("malformed header {header:?}"))),
        };
        let mut entries = Vec::with_capacity(count);
        for (n, line) in lines.enumerate() {
            if n >= count {
                if line.is_empty() {
                    continue;
                }
                return Err(bad(format!("more than {count} entries")));
            }
            entries.push(unescape_entry(line).ok_or_else(|| bad(format!("bad escape on line {}", n + 2)))?);
        }
        if entries.len() != count {
            return Err(bad(format!("expected {count} entries, found {}", entries.len())));
        }
        Self::with_max_token_bytes(entries, bound)
    }

    /// SHA-256 of the serialized form.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_file_string().as_bytes()).into()
    }
}

fn unescape_entry(line: &str) -> Option<Vec<u8>> {
    let bytes = line.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'\\' {
            if bytes.get(i + 1) != Some(&b'x') || i + 4 > bytes.len() {
                return None;
            }
            let hex = std::str::from_utf8(&bytes[i + 2..i + 4]).ok()?;
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 4;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    Some(out)
}

/// A tokenized text: token ids with the number of bytes each one covers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenStream {
    ids: Vec<TokenId>,
    byte_lens: Vec<u32>,
    n_chars: u64,
}

impl TokenStream {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, id: TokenId, byte_len: u32) {
        debug_assert!(byte_len >= 1);
        self.ids.push(id);
        self.byte_lens.push(byte_len);
        self.n_chars += u64::from(byte_len);
    }

    /// Rebuilds a stream from decoded ids, taking lengths from the vocabulary.
    pub fn from_ids(ids: Vec<TokenId>, vocab: &Vocabulary) -> Result<Self> {
        let mut byte_lens = Vec::with_capacity(ids.len());
        let mut n_chars = 0u64;
        for &id in &ids {
            let entry = vocab.entry(id).ok_or_else(|| {
                Error::InvalidStream(format!("token id {id} outside vocabulary of {}", vocab.len()))
            })?;
            byte_lens.push(entry.len() as u32);
            n_chars += entry.len() as u64;
        }
        Ok(Self {
            ids,
            byte_lens,
            n_chars,
        })
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn byte_lens(&self) -> &[u32] {
        &self.byte_lens
    }

    pub fn iter(&self) -> impl Iterator<Item = (TokenId, u32)> + '_ {
        self.ids.iter().copied().zip(self.byte_lens.iter().copied())
    }

    /// `N_T`
    pub fn n_tokens(&self) -> usize {
        self.ids.len()
    }

    /// `N_c`, in bytes.
    pub fn n_chars(&self) -> u64 {
        self.n_chars
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Contiguous sub-stream of tokens `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        let ids = self.ids[range.clone()].to_vec();
        let byte_lens = self.byte_lens[range].to_vec();
        let n_chars = byte_lens.iter().map(|&b| u64::from(b)).sum();
        Self {
            ids,
            byte_lens,
            n_chars,
        }
    }
}

/// Character positions `m_i` at which each token is emitted.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenBoundaryIndex {
    boundaries: Vec<u64>,
}

impl TokenBoundaryIndex {
    pub fn from_stream(stream: &TokenStream) -> Self {
        let mut end = 0u64;
        let boundaries = stream
            .byte_lens()
            .iter()
            .map(|&b| {
                end += u64::from(b);
                end
            })
            .collect();
        Self { boundaries }
    }

    pub fn boundaries(&self) -> &[u64] {
        &self.boundaries
    }
}

/// Greedy longest-match tokenization.
pub fn tokenize(text: &[u8], vocab: &Vocabulary) -> (TokenStream, TokenBoundaryIndex) {
    let mut stream = TokenStream::new();
    let max = vocab.max_token_bytes().max(1);
    let mut pos = 0;
    while pos < text.len() {
        let longest = max.min(text.len() - pos);
        let (id, len) = (1..=longest)
            .rev()
            .find_map(|len| vocab.id_of(&text[pos..pos + len]).map(|id| (id, len)))
            .expect("vocabulary covers every single byte");
        stream.push(id, len as u32);
        pos += len;
    }
    let index = TokenBoundaryIndex::from_stream(&stream);
    (stream, index)
}

pub fn detokenize(ids: &[TokenId], vocab: &Vocabulary) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for &id in ids {
        let entry = vocab.entry(id).ok_or_else(|| {
            Error::InvalidStream(format!("token id {id} outside vocabulary of {}", vocab.len()))
        })?;
        out.extend_from_slice(entry);
    }
    Ok(out)
}

/// `N_c / N_T` as an exact rational.
pub fn mean_chars_per_token(stream: &TokenStream) -> Result<Ratio<u64>> {
    chars_per_token(stream.n_chars(), stream.n_tokens() as u64)
}

pub fn chars_per_token(n_chars: u64, n_tokens: u64) -> Result<Ratio<u64>> {
    if n_tokens == 0 {
        return Err(Error::UndefinedStatistic("mean characters per token of an empty stream"));
    }
    Ok(Ratio::new(n_chars, n_tokens))
}

/// Reduces text to lowercase ASCII letters separated by single spaces.
pub fn preprocess_text8(raw: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(raw.len());
    let mut gap = false;
    for &b in raw {
        let lower = b.to_ascii_lowercase();
        if lower.is_ascii_lowercase() {
            if gap && !out.is_empty() {
                out.push(b' ');
            }
            gap = false;
            out.push(lower);
        } else {
            gap = true;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ab_vocab() -> Vocabulary {
        Vocabulary::bytes_plus(["ab"]).unwrap()
    }

    #[test]
    fn preprocess_examples() {
        assert_eq!(preprocess_text8(b""), b"");
        assert_eq!(preprocess_text8(b"My  Book!"), b"my book");
        assert_eq!(preprocess_text8(b"abc"), b"abc");
        assert_eq!(preprocess_text8(b"  --Hello,\n\tWORLD 42 "), b"hello world");
        assert_eq!(preprocess_text8("caf\u{e9} ok".as_bytes()), b"caf ok");
    }

    #[test]
    fn greedy_longest_match() {
        let vocab = ab_vocab();
        let ab = vocab.id_of(b"ab").unwrap();
        let (stream, index) = tokenize(b"abab", &vocab);
        assert_eq!(stream.ids(), &[ab, ab]);
        assert_eq!(stream.byte_lens(), &[2, 2]);
        assert_eq!(index.boundaries(), &[2, 4]);

        let (stream, _) = tokenize(b"aab", &vocab);
        assert_eq!(stream.ids(), &[u32::from(b'a'), ab]);
    }

    #[test]
    fn empty_and_byte_streams() {
        let (stream, index) = tokenize(b"", &ab_vocab());
        assert_eq!((stream.n_tokens(), stream.n_chars()), (0, 0));
        assert!(index.boundaries().is_empty());

        let (stream, _) = tokenize(b"xyz", &Vocabulary::bytes());
        assert_eq!(stream.ids(), &[120, 121, 122]);
        assert_eq!(stream.byte_lens(), &[1, 1, 1]);
    }

    #[test]
    fn detokenize_examples() {
        let vocab = ab_vocab();
        let ab = vocab.id_of(b"ab").unwrap();
        assert_eq!(detokenize(&[ab, ab], &vocab).unwrap(), b"abab");
        assert_eq!(detokenize(&[], &vocab).unwrap(), b"");
        assert_eq!(detokenize(&[109, 121], &Vocabulary::bytes()).unwrap(), b"my");
        assert!(matches!(
            detokenize(&[256], &Vocabulary::bytes()),
            Err(Error::InvalidStream(_))
        ));
    }

    #[test]
    fn chars_per_token_examples() {
        assert_eq!(
            chars_per_token(9_137_710, 2_000_000).unwrap(),
            Ratio::new(4_568_855, 1_000_000)
        );
        let (stream, _) = tokenize(b"hello", &Vocabulary::bytes());
        assert_eq!(mean_chars_per_token(&stream).unwrap(), Ratio::from_integer(1));

        let mut stream = TokenStream::new();
        stream.push(300, 2);
        stream.push(301, 2);
        stream.push(7, 1);
        assert_eq!(mean_chars_per_token(&stream).unwrap(), Ratio::new(5, 3));
        assert!(matches!(
            mean_chars_per_token(&TokenStream::new()),
            Err(Error::UndefinedStatistic(_))
        ));
    }

    #[test]
    fn vocabulary_invariants_enforced() {
        assert!(Vocabulary::bytes_plus([b"".as_slice()]).is_err());
        assert!(Vocabulary::bytes_plus(["ab", "ab"]).is_err());
        assert!(Vocabulary::new(vec![b"a".to_vec()]).is_err());
        assert!(Vocabulary::with_max_token_bytes(
            (0..=255u8).map(|b| vec![b]).chain([b"abc".to_vec()]).collect(),
            2
        )
        .is_err());
        assert!(Vocabulary::bytes().is_byte_vocabulary());
        assert!(!ab_vocab().is_byte_vocabulary());
    }

    #[test]
    fn vocabulary_file_roundtrip() {
        let vocab = Vocabulary::bytes_plus(["the ", "\\x", "a\nb", "\u{e9}t\u{e9}"]).unwrap();
        let text = vocab.to_file_string();
        assert!(text.starts_with("260 5\n"));
        assert!(text.lines().skip(1).all(|l| !l.contains(' ')));
        let back = Vocabulary::parse(&text).unwrap();
        assert_eq!(back, vocab);
        assert_eq!(back.digest(), vocab.digest());
        assert_ne!(vocab.digest(), Vocabulary::bytes().digest());
    }

    #[test]
    fn vocabulary_parse_errors() {
        assert!(Vocabulary::parse("").is_err());
        assert!(Vocabulary::parse("2 1\na\nb\n").is_err());
        let mut text = Vocabulary::bytes().to_file_string();
        text.push_str("zz\n");
        assert!(Vocabulary::parse(&text).is_err());
        let text = Vocabulary::bytes().to_file_string().replacen("\\x00", "\\q0", 1);
        assert!(Vocabulary::parse(&text).is_err());
    }

    fn vocab_strategy() -> impl Strategy<Value = Vocabulary> {
        proptest::collection::btree_set(proptest::collection::vec(b'a'..=b'd', 2..5), 0..12)
            .prop_map(|extra| Vocabulary::bytes_plus(extra).unwrap())
    }

    proptest! {
        #[test]
        fn roundtrip_and_boundaries(
            vocab in vocab_strategy(),
            text in proptest::collection::vec(prop_oneof![b'a'..=b'e', any::<u8>()], 0..200),
        ) {
            let (stream, index) = tokenize(&text, &vocab);
            prop_assert_eq!(detokenize(stream.ids(), &vocab).unwrap(), text.clone());
            prop_assert_eq!(stream.n_chars(), text.len() as u64);
            prop_assert_eq!(stream.byte_lens().iter().map(|&b| u64::from(b)).sum::<u64>(), stream.n_chars());
            let m = index.boundaries();
            prop_assert_eq!(m.len(), stream.n_tokens());
            for i in 0..m.len() {
                let prev = if i == 0 { 0 } else { m[i - 1] };
                prop_assert!(m[i] > prev);
                prop_assert_eq!(m[i] - prev, u64::from(stream.byte_lens()[i]));
            }
        }

        #[test]
        fn distinct_token_sequences_decode_distinctly(
            vocab in vocab_strategy(),
            a in proptest::collection::vec(b'a'..=b'd', 0..40),
            b in proptest::collection::vec(b'a'..=b'd', 0..40),
        ) {
            let (sa, _) = tokenize(&a, &vocab);
            let (sb, _) = tokenize(&b, &vocab);
            if sa.ids() != sb.ids() {
                prop_assert_ne!(detokenize(sa.ids(), &vocab).unwrap(), detokenize(sb.ids(), &vocab).unwrap());
            }
        }

        #[test]
        fn preprocess_idempotent(raw in proptest::collection::vec(any::<u8>(), 0..300)) {
            let once = preprocess_text8(&raw);
            prop_assert!(once.iter().all(|&b| b == b' ' || b.is_ascii_lowercase()));
            prop_assert!(!once.windows(2).any(|w| w == b"  "));
            prop_assert!(once.first() != Some(&b' ') && once.last() != Some(&b' '));
            prop_assert_eq!(preprocess_text8(&once), once);
        }
    }
}
