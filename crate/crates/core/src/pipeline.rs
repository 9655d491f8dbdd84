//! In-memory compress / decompress / estimate / bench.

use std::borrow::Cow;
use std::time::Duration;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::ac::{ac_decode, RangeEncoder};
use crate::bridge::{BridgeAddress, BridgeClient, BridgePredictor, DEFAULT_TIMEOUT};
use crate::container::{
    CodecId, Container, ContainerHeader, PredictorId, TokenizerId, FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::metrics::{batch_stats, StreamMetrics, SweepReport};
use crate::predictor::{AdaptivePredictor, Predictor, StaticPredictor, MAX_ORDER};
use crate::rank::{decode_ranks, deflate_bytes, encode_ranks, from_ranks, rank_of, DEFLATE_LEVEL};
use crate::tbyt::{tbyt_decode, TbytEncoder, TbytOutput};
use crate::token::{detokenize, preprocess_text8, tokenize, TokenId, TokenStream, Vocabulary};

pub const DEFAULT_ORDER: usize = 3;
pub const DEFAULT_MEMORY: usize = 64;
pub const DEFAULT_BATCH_TOKENS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenizerSpec {
    Byte,
    Vocab(Vocabulary),
    /// The bridge server's own tokenizer.
    External,
}

impl TokenizerSpec {
    fn id(&self) -> TokenizerId {
        match self {
            Self::Byte => TokenizerId::Byte,
            Self::Vocab(_) => TokenizerId::Vocab,
            Self::External => TokenizerId::External,
        }
    }

    fn vocabulary(&self) -> Option<Cow<'_, Vocabulary>> {
        match self {
            Self::Byte => Some(Cow::Owned(Vocabulary::bytes())),
            Self::Vocab(v) => Some(Cow::Borrowed(v)),
            Self::External => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PredictorSpec {
    Uniform,
    Adaptive { order: usize, memory: usize },
    /// `memory = 0` uses the server's maximum.
    External { address: BridgeAddress, memory: usize },
}

impl PredictorSpec {
    pub fn adaptive_default() -> Self {
        Self::Adaptive {
            order: DEFAULT_ORDER,
            memory: DEFAULT_MEMORY,
        }
    }

    fn id(&self) -> PredictorId {
        match self {
            Self::Uniform => PredictorId::Uniform,
            Self::Adaptive { .. } => PredictorId::Adaptive,
            Self::External { .. } => PredictorId::External,
        }
    }

    /// Same predictor with memory `m`; the uniform model has none.
    pub fn with_memory(&self, m: usize) -> Self {
        match self {
            Self::Uniform => Self::Uniform,
            Self::Adaptive { order, .. } => Self::Adaptive {
                order: *order,
                memory: m,
            },
            Self::External { address, .. } => Self::External {
                address: address.clone(),
                memory: m,
            },
        }
    }

    pub fn memory(&self) -> usize {
        match self {
            Self::Uniform => 0,
            Self::Adaptive { memory, .. } | Self::External { memory, .. } => *memory,
        }
    }
}

/// Which codecs a single predictor pass should drive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodecSet {
    pub rank: bool,
    pub tbyt: bool,
    pub ac: bool,
}

impl CodecSet {
    pub const ALL: CodecSet = CodecSet {
        rank: true,
        tbyt: true,
        ac: true,
    };
    pub const NONE: CodecSet = CodecSet {
        rank: false,
        tbyt: false,
        ac: false,
    };

    pub fn only(codec: CodecId) -> Self {
        let mut set = Self::NONE;
        match codec {
            CodecId::Rank => set.rank = true,
            CodecId::Tbyt => set.tbyt = true,
            CodecId::Ac => set.ac = true,
        }
        set
    }
}

/// Output of one predictor pass over a token sequence.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub metrics: StreamMetrics,
    pub rank_payload: Option<Vec<u8>>,
    pub tbyt: Option<TbytOutput>,
    pub ac_payload: Option<Vec<u8>>,
}

/// Feeds every prediction to the cross-entropy sum and to each selected
/// encoder, so all columns see the same distributions. `n_chars` is only
/// recorded, not checked.
pub fn analyze<P: Predictor + ?Sized>(
    tokens: &[TokenId],
    n_chars: u64,
    predictor: &mut P,
    codecs: CodecSet,
) -> Result<Analysis> {
    let mut bits = 0.0f64;
    let mut ranks = codecs.rank.then(|| Vec::with_capacity(tokens.len()));
    let mut tbyt = codecs.tbyt.then(TbytEncoder::new);
    let mut ac = codecs.ac.then(RangeEncoder::new);
    let d = predictor.vocab_size();
    for &t in tokens {
        crate::predictor::check_token(t, d)?;
        let pmf = predictor.predict()?;
        bits += pmf.information_bits(t);
        if let Some(r) = ranks.as_mut() {
            r.push(rank_of(pmf, t));
        }
        if let Some(enc) = tbyt.as_mut() {
            enc.encode(pmf, t)?;
        }
        if let Some(enc) = ac.as_mut() {
            enc.encode(pmf, t);
        }
        predictor.update(t)?;
    }
    let rank_payload = ranks.map(|r| encode_ranks(&r));
    let tbyt = tbyt.map(TbytEncoder::finish);
    let ac_payload = ac.map(RangeEncoder::finish);
    let metrics = StreamMetrics {
        n_chars,
        n_tokens: tokens.len() as u64,
        cross_entropy_bits: bits,
        rank_bits: rank_payload.as_ref().map(|p| p.len() as u64 * 8),
        tbyt_bits: tbyt.as_ref().map(|o| o.profile.total_bits),
        tbyt_emitted_bits: tbyt.as_ref().map(|o| o.payload.len() as u64 * 8),
        ac_bits: ac_payload.as_ref().map(|p| p.len() as u64 * 8),
        deflate_bits: None,
    };
    Ok(Analysis {
        metrics,
        rank_payload,
        tbyt,
        ac_payload,
    })
}

#[derive(Debug, Clone)]
pub struct CompressOptions {
    pub codec: CodecId,
    pub tokenizer: TokenizerSpec,
    pub predictor: PredictorSpec,
    pub preprocess_text8: bool,
    pub timeout: Duration,
}

impl Default for CompressOptions {
    fn default() -> Self {
        Self {
            codec: CodecId::Ac,
            tokenizer: TokenizerSpec::Byte,
            predictor: PredictorSpec::adaptive_default(),
            preprocess_text8: false,
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

enum Model {
    Local(Box<dyn Predictor + Send>),
    Remote(BridgePredictor),
}

impl Predictor for Model {
    fn vocab_size(&self) -> usize {
        match self {
            Model::Local(p) => p.vocab_size(),
            Model::Remote(p) => p.vocab_size(),
        }
    }

    fn predict(&mut self) -> Result<&crate::QuantizedPmf> {
        match self {
            Model::Local(p) => p.predict(),
            Model::Remote(p) => p.predict(),
        }
    }

    fn update(&mut self, actual: TokenId) -> Result<()> {
        match self {
            Model::Local(p) => p.update(actual),
            Model::Remote(p) => p.update(actual),
        }
    }
}

/// A predictor together with the tokenizer it is used with.
struct Session {
    model: Model,
    vocab: Option<Vocabulary>,
    /// Effective memory and order as recorded in the header.
    memory: u32,
    order: u8,
    model_tag: String,
    digest: [u8; 32],
}

impl Session {
    fn open(tokenizer: &TokenizerSpec, predictor: &PredictorSpec, timeout: Duration) -> Result<Self> {
        let vocab = tokenizer.vocabulary().map(Cow::into_owned);
        if let PredictorSpec::External { address, memory } = predictor {
            let client = BridgeClient::connect(address, timeout)?;
            let tag = client.hello().model_tag.clone();
            let remote = BridgePredictor::new(client, *memory)?;
            let digest = match &vocab {
                Some(v) => {
                    if v.len() != remote.vocab_size() {
                        return Err(Error::Config(format!(
                            "server vocabulary has {} tokens, local tokenizer has {}",
                            remote.vocab_size(),
                            v.len()
                        )));
                    }
                    v.digest()
                }
                None => Sha256::digest(tag.as_bytes()).into(),
            };
            return Ok(Self {
                memory: to_u32(remote.memory(), "memory")?,
                order: 0,
                model: Model::Remote(remote),
                vocab,
                model_tag: tag,
                digest,
            });
        }
        let vocab = vocab.ok_or_else(|| {
            Error::Config("the external tokenizer needs the external predictor".into())
        })?;
        let d = vocab.len();
        let (local, memory, order): (Box<dyn Predictor + Send>, usize, usize) = match predictor {
            PredictorSpec::Adaptive { order, memory } => {
                (Box::new(AdaptivePredictor::new(d, *order, *memory)?), *memory, *order)
            }
            _ => (Box::new(StaticPredictor::uniform(d)?), 0, 0),
        };
        Ok(Self {
            model: Model::Local(local),
            digest: vocab.digest(),
            vocab: Some(vocab),
            memory: to_u32(memory, "memory")?,
            order: order as u8,
            model_tag: String::new(),
        })
    }

    fn bridge(&mut self) -> Result<&mut BridgeClient> {
        match &mut self.model {
            Model::Remote(p) => Ok(p.client_mut()),
            Model::Local(_) => Err(Error::Config("no bridge connection".into())),
        }
    }

    fn tokenize(&mut self, text: &[u8]) -> Result<TokenStream> {
        match &self.vocab {
            Some(v) => Ok(tokenize(text, v).0),
            None => self.bridge()?.tokenize(text),
        }
    }

    fn detokenize(&mut self, ids: &[TokenId]) -> Result<Vec<u8>> {
        match &self.vocab {
            Some(v) => detokenize(ids, v).map_err(|e| Error::corrupt(e.to_string())),
            None => self.bridge()?.detokenize(ids),
        }
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Config(format!("{what} {v} does not fit in 32 bits")))
}

fn prepare(input: &[u8], preprocess: bool) -> Cow<'_, [u8]> {
    if preprocess {
        Cow::Owned(preprocess_text8(input))
    } else {
        Cow::Borrowed(input)
    }
}

#[derive(Debug, Clone)]
pub struct Compressed {
    pub bytes: Vec<u8>,
    pub header: ContainerHeader,
    /// Codec column holds payload bits only; see [`Compressed::total_bits`].
    pub metrics: StreamMetrics,
}

impl Compressed {
    pub fn payload_bits(&self) -> u64 {
        self.header.payload_len * 8
    }

    /// Payload plus header.
    pub fn total_bits(&self) -> u64 {
        self.bytes.len() as u64 * 8
    }
}

pub fn compress(input: &[u8], options: &CompressOptions) -> Result<Compressed> {
    let text = prepare(input, options.preprocess_text8);
    let mut session = Session::open(&options.tokenizer, &options.predictor, options.timeout)?;
    let stream = session.tokenize(&text)?;
    let analysis = analyze(
        stream.ids(),
        stream.n_chars(),
        &mut session.model,
        CodecSet::only(options.codec),
    )?;
    let (payload, padding_bits) = match options.codec {
        CodecId::Rank => (analysis.rank_payload.expect("rank selected"), 0),
        CodecId::Tbyt => {
            let out = analysis.tbyt.expect("tbyt selected");
            (out.payload, out.padding_bits)
        }
        CodecId::Ac => (analysis.ac_payload.expect("ac selected"), 0),
    };
    let header = ContainerHeader {
        format_version: FORMAT_VERSION,
        codec: options.codec,
        codec_level: if options.codec == CodecId::Rank { DEFLATE_LEVEL as u8 } else { 0 },
        tokenizer: options.tokenizer.id(),
        vocab_digest: session.digest,
        predictor: options.predictor.id(),
        memory: session.memory,
        order: session.order,
        model_tag: session.model_tag.clone(),
        n_tokens: stream.n_tokens() as u64,
        n_chars: stream.n_chars(),
        payload_len: payload.len() as u64,
        padding_bits,
        crc32: crc32fast::hash(&text),
    };
    let mut metrics = analysis.metrics;
    metrics.deflate_bits = Some(deflate_bytes(&text).len() as u64 * 8);
    let container = Container { header, payload };
    let bytes = container.to_bytes()?;
    Ok(Compressed {
        bytes,
        header: container.header,
        metrics,
    })
}

/// What the decoding side declares about its configuration. Anything left
/// `None` is taken from the header; anything given must agree with it.
#[derive(Debug, Clone)]
pub struct DecompressOptions {
    /// Required when the container used a vocabulary file.
    pub tokenizer: Option<TokenizerSpec>,
    /// Required (for its address) when the container used the external
    /// predictor.
    pub predictor: Option<PredictorSpec>,
    pub timeout: Duration,
}

impl Default for DecompressOptions {
    fn default() -> Self {
        Self {
            tokenizer: None,
            predictor: None,
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

fn mismatch(msg: impl Into<String>) -> Error {
    Error::PredictorMismatch(msg.into())
}

fn resolve_tokenizer(header: &ContainerHeader, declared: Option<&TokenizerSpec>) -> Result<TokenizerSpec> {
    match (header.tokenizer, declared) {
        (TokenizerId::Byte, None | Some(TokenizerSpec::Byte)) => Ok(TokenizerSpec::Byte),
        (TokenizerId::Vocab, Some(spec @ TokenizerSpec::Vocab(_))) => Ok(spec.clone()),
        (TokenizerId::Vocab, None) => Err(Error::Config(
            "container was made with a vocabulary file; supply the same file".into(),
        )),
        (TokenizerId::External, None | Some(TokenizerSpec::External)) => Ok(TokenizerSpec::External),
        (id, Some(spec)) => Err(mismatch(format!(
            "container tokenizer {id:?} differs from declared {:?}",
            spec.id()
        ))),
    }
}

fn resolve_predictor(header: &ContainerHeader, declared: Option<&PredictorSpec>) -> Result<PredictorSpec> {
    if let Some(spec) = declared {
        if spec.id() != header.predictor {
            return Err(mismatch(format!(
                "container predictor {:?} differs from declared {:?}",
                header.predictor,
                spec.id()
            )));
        }
        let agrees = match spec {
            PredictorSpec::Uniform => true,
            PredictorSpec::Adaptive { order, memory } => {
                *order == usize::from(header.order) && *memory == header.memory as usize
            }
            PredictorSpec::External { memory, .. } => *memory == 0 || *memory == header.memory as usize,
        };
        if !agrees {
            return Err(mismatch(format!(
                "container predictor parameters (order {}, memory {}) differ from declared {spec:?}",
                header.order, header.memory
            )));
        }
    }
    match header.predictor {
        PredictorId::Uniform => Ok(PredictorSpec::Uniform),
        PredictorId::Adaptive => {
            if usize::from(header.order) > MAX_ORDER {
                return Err(Error::corrupt(format!("context order {} in header", header.order)));
            }
            Ok(PredictorSpec::Adaptive {
                order: usize::from(header.order),
                memory: header.memory as usize,
            })
        }
        PredictorId::External => match declared {
            Some(PredictorSpec::External { address, .. }) => Ok(PredictorSpec::External {
                address: address.clone(),
                memory: header.memory as usize,
            }),
            _ => Err(Error::Config(
                "container was made with an external predictor; supply its address".into(),
            )),
        },
    }
}

pub fn decompress(bytes: &[u8], options: &DecompressOptions) -> Result<Vec<u8>> {
    let Container { header, payload } = Container::from_bytes(bytes)?;
    let tokenizer = resolve_tokenizer(&header, options.tokenizer.as_ref())?;
    let predictor = resolve_predictor(&header, options.predictor.as_ref())?;
    if header.n_tokens > header.n_chars {
        return Err(Error::corrupt("more tokens than characters"));
    }
    let mut session = Session::open(&tokenizer, &predictor, options.timeout).map_err(|e| match e {
        Error::Config(m) => mismatch(m),
        e => e,
    })?;
    if session.model_tag != header.model_tag {
        return Err(mismatch(format!(
            "server model {:?} differs from container model {:?}",
            session.model_tag, header.model_tag
        )));
    }
    if session.digest != header.vocab_digest {
        return Err(mismatch("tokenizer digest differs from the container"));
    }
    if session.memory != header.memory {
        return Err(mismatch(format!(
            "predictor memory {} differs from container memory {}",
            session.memory, header.memory
        )));
    }

    let tokens = match header.codec {
        CodecId::Rank => {
            let ranks = decode_ranks(&payload)?;
            if ranks.len() as u64 != header.n_tokens {
                return Err(Error::corrupt(format!(
                    "payload holds {} ranks, header declares {}",
                    ranks.len(),
                    header.n_tokens
                )));
            }
            from_ranks(&ranks, &mut session.model)?
        }
        CodecId::Tbyt => tbyt_decode(&payload, header.padding_bits, header.n_tokens, &mut session.model)?,
        CodecId::Ac => ac_decode(&payload, header.n_tokens, &mut session.model)?,
    };
    let text = session.detokenize(&tokens)?;
    if text.len() as u64 != header.n_chars {
        return Err(Error::corrupt(format!(
            "decoded {} bytes, header declares {}",
            text.len(),
            header.n_chars
        )));
    }
    if crc32fast::hash(&text) != header.crc32 {
        return Err(Error::corrupt("crc32 of decoded text does not match"));
    }
    Ok(text)
}

#[derive(Debug, Clone)]
pub struct EstimateOptions {
    pub tokenizer: TokenizerSpec,
    pub predictor: PredictorSpec,
    pub preprocess_text8: bool,
    pub codecs: CodecSet,
    pub timeout: Duration,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            tokenizer: TokenizerSpec::Byte,
            predictor: PredictorSpec::adaptive_default(),
            preprocess_text8: false,
            codecs: CodecSet::NONE,
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

/// `Ĥ_ub` of the whole input, plus any requested codec sizes and the
/// standalone DEFLATE baseline.
pub fn estimate(input: &[u8], options: &EstimateOptions) -> Result<StreamMetrics> {
    let text = prepare(input, options.preprocess_text8);
    let mut session = Session::open(&options.tokenizer, &options.predictor, options.timeout)?;
    let stream = session.tokenize(&text)?;
    if stream.n_chars() == 0 {
        return Err(Error::UndefinedStatistic("entropy bound of an empty stream"));
    }
    let mut metrics = analyze(stream.ids(), stream.n_chars(), &mut session.model, options.codecs)?.metrics;
    metrics.deflate_bits = Some(deflate_bytes(&text).len() as u64 * 8);
    Ok(metrics)
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub tokenizer: TokenizerSpec,
    pub predictor: PredictorSpec,
    pub preprocess_text8: bool,
    pub batch_tokens: usize,
    /// `None` takes as many whole batches as the corpus holds.
    pub batch_count: Option<usize>,
    /// Memory values to sweep; empty means the predictor's own memory.
    pub memories: Vec<usize>,
    pub codecs: CodecSet,
    pub timeout: Duration,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            tokenizer: TokenizerSpec::Byte,
            predictor: PredictorSpec::adaptive_default(),
            preprocess_text8: false,
            batch_tokens: DEFAULT_BATCH_TOKENS,
            batch_count: None,
            memories: Vec::new(),
            codecs: CodecSet::ALL,
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

/// Tokenizes the corpus once, cuts it into contiguous batches of
/// `batch_tokens` tokens, and runs a fresh predictor over each batch for
/// every memory value. Batches run in parallel for local predictors; rows
/// come back in batch order either way.
pub fn bench(input: &[u8], config: &BenchConfig) -> Result<SweepReport> {
    if config.batch_tokens == 0 {
        return Err(Error::Config("batch size must be at least one token".into()));
    }
    let memories = if config.memories.is_empty() {
        vec![config.predictor.memory()]
    } else {
        config.memories.clone()
    };
    let text = prepare(input, config.preprocess_text8);
    let stream = Session::open(&config.tokenizer, &config.predictor, config.timeout)?.tokenize(&text)?;
    let available = stream.n_tokens() / config.batch_tokens;
    let count = config.batch_count.unwrap_or(available);
    if count == 0 || count > available {
        return Err(Error::Config(format!(
            "corpus has {} tokens, not enough for {} batches of {}",
            stream.n_tokens(),
            count.max(1),
            config.batch_tokens
        )));
    }
    let mut offsets = Vec::with_capacity(stream.n_tokens() + 1);
    offsets.push(0usize);
    for &len in stream.byte_lens() {
        offsets.push(offsets.last().expect("non-empty") + len as usize);
    }

    let mut entries = Vec::with_capacity(memories.len());
    for &m in &memories {
        let spec = config.predictor.with_memory(m);
        let run = |i: usize| -> Result<StreamMetrics> {
            let span = i * config.batch_tokens..(i + 1) * config.batch_tokens;
            let bytes = &text[offsets[span.start]..offsets[span.end]];
            let mut session = Session::open(&config.tokenizer, &spec, config.timeout)?;
            let mut metrics =
                analyze(&stream.ids()[span], bytes.len() as u64, &mut session.model, config.codecs)?.metrics;
            metrics.deflate_bits = Some(deflate_bytes(bytes).len() as u64 * 8);
            Ok(metrics)
        };
        let rows = if matches!(spec, PredictorSpec::External { .. }) {
            (0..count).map(run).collect::<Result<Vec<_>>>()?
        } else {
            (0..count).into_par_iter().map(run).collect::<Result<Vec<_>>>()?
        };
        entries.push((m, batch_stats(rows)?));
    }
    Ok(SweepReport { entries })
}
