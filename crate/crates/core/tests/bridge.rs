//! The client side of the bridge against an in-process mock server.

use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use lmzip::bridge::{
    expand_sparse, parse_pmf, put_u32s, read_frame, write_frame, BridgeAddress, BridgeClient,
    BridgePredictor, Frame, PayloadReader, ServerHello, FRAME_DETOKENIZE, FRAME_ERROR,
    FRAME_HELLO, FRAME_PMF, FRAME_PREDICT, FRAME_TOKENIZE, PROTOCOL_VERSION,
};
use lmzip::container::{CodecId, PredictorId, TokenizerId};
use lmzip::pipeline::{
    compress, decompress, CompressOptions, DecompressOptions, PredictorSpec, TokenizerSpec,
};
use lmzip::{Error, Predictor, TokenId, PMF_TOTAL};
use sha2::{Digest, Sha256};

const WORDS: [&str; 6] = ["the ", "and ", "of ", "compress", "ion", "  "];
const D: u32 = 256 + WORDS.len() as u32;

#[derive(Clone, Copy, PartialEq)]
enum Mode {
    Dense,
    Sparse,
    /// Dense for even context lengths, sparse for odd.
    Mixed,
}

#[derive(Clone)]
struct Mock {
    tag: String,
    version: u16,
    pmf_total: u32,
    max_memory: u32,
    mode: Mode,
    fail_predict: bool,
    /// Close the connection after this many predict requests.
    hang_up_after: Option<usize>,
}

impl Mock {
    fn new(tag: &str) -> Self {
        Self {
            tag: tag.into(),
            version: PROTOCOL_VERSION,
            pmf_total: PMF_TOTAL,
            max_memory: 16,
            mode: Mode::Mixed,
            fail_predict: false,
            hang_up_after: None,
        }
    }

    /// Listed ids and weights for a context; everything else shares `rest`.
    fn boosts(context: &[TokenId]) -> (Vec<(u32, u32)>, u32) {
        let last = context.last().copied().unwrap_or(0);
        let mut ids: Vec<u32> = (0..4u32)
            .map(|j| (last.wrapping_mul(31) + j * 97 + context.len() as u32 * 7) % D)
            .collect();
        ids.push(u32::from(b' '));
        ids.push(u32::from(b'e'));
        ids.sort_unstable();
        ids.dedup();
        let listed: Vec<(u32, u32)> = ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, 1_000_000 + 123_457 * i as u32 + context.len() as u32))
            .collect();
        let rest = PMF_TOTAL - listed.iter().map(|&(_, w)| w).sum::<u32>();
        (listed, rest)
    }

    fn pmf_frame(&self, context: &[TokenId]) -> Frame {
        let (listed, rest) = Self::boosts(context);
        let dense = match self.mode {
            Mode::Dense => true,
            Mode::Sparse => false,
            Mode::Mixed => context.len().is_multiple_of(2),
        };
        let mut p = Vec::new();
        if dense {
            // Same floor split as the sparse form, written out in full.
            let unlisted = D - listed.len() as u32;
            let (base, mut extra) = (rest / unlisted, rest % unlisted);
            let mut weights = vec![0u32; D as usize];
            for &(id, w) in &listed {
                weights[id as usize] = w;
            }
            for w in weights.iter_mut().filter(|w| **w == 0) {
                *w = base + u32::from(extra > 0);
                extra = extra.saturating_sub(1);
            }
            p.push(0);
            put_u32s(&mut p, &weights);
        } else {
            p.push(1);
            put_u32s(&mut p, &[listed.len() as u32]);
            for &(id, w) in &listed {
                put_u32s(&mut p, &[id, w]);
            }
            put_u32s(&mut p, &[rest]);
        }
        Frame::new(FRAME_PMF, p)
    }

    fn tokenize(text: &[u8]) -> (Vec<u32>, Vec<u32>) {
        let (mut ids, mut lens) = (Vec::new(), Vec::new());
        let mut i = 0;
        while i < text.len() {
            let word = WORDS
                .iter()
                .enumerate()
                .filter(|(_, w)| text[i..].starts_with(w.as_bytes()))
                .max_by_key(|(_, w)| w.len());
            match word {
                Some((k, w)) => {
                    ids.push(256 + k as u32);
                    lens.push(w.len() as u32);
                    i += w.len();
                }
                None => {
                    ids.push(u32::from(text[i]));
                    lens.push(1);
                    i += 1;
                }
            }
        }
        (ids, lens)
    }

    fn serve(&self, mut stream: TcpStream, log: &Mutex<Vec<Vec<TokenId>>>) {
        let mut predicts = 0;
        while let Ok(Some(frame)) = read_frame(&mut stream) {
            let mut r = PayloadReader::new(&frame.payload);
            let reply = match frame.kind {
                FRAME_HELLO => ServerHello {
                    protocol_version: self.version,
                    vocab_size: D,
                    pmf_total: self.pmf_total,
                    max_memory: self.max_memory,
                    model_tag: self.tag.clone(),
                }
                .to_frame(),
                FRAME_PREDICT => {
                    if self.hang_up_after == Some(predicts) {
                        return;
                    }
                    predicts += 1;
                    let n = r.u32().unwrap() as usize;
                    let context = r.u32s(n).unwrap();
                    log.lock().unwrap().push(context.clone());
                    if self.fail_predict {
                        Frame::new(FRAME_ERROR, b"model exploded".to_vec())
                    } else {
                        self.pmf_frame(&context)
                    }
                }
                FRAME_TOKENIZE => {
                    let (ids, lens) = Self::tokenize(&frame.payload);
                    let mut p = Vec::new();
                    put_u32s(&mut p, &[ids.len() as u32]);
                    put_u32s(&mut p, &ids);
                    put_u32s(&mut p, &lens);
                    Frame::new(FRAME_TOKENIZE, p)
                }
                FRAME_DETOKENIZE => {
                    let n = r.u32().unwrap() as usize;
                    let mut text = Vec::new();
                    for id in r.u32s(n).unwrap() {
                        match id.checked_sub(256) {
                            Some(k) => text.extend_from_slice(WORDS[k as usize].as_bytes()),
                            None => text.push(id as u8),
                        }
                    }
                    Frame::new(FRAME_DETOKENIZE, text)
                }
                k => Frame::new(FRAME_ERROR, format!("unknown frame 0x{k:02x}").into_bytes()),
            };
            if write_frame(&mut stream, &reply).is_err() {
                return;
            }
        }
    }
}

struct Server {
    address: BridgeAddress,
    log: Arc<Mutex<Vec<Vec<TokenId>>>>,
}

impl Server {
    fn start(mock: Mock) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let address = BridgeAddress::parse(&format!("tcp://{}", listener.local_addr().unwrap())).unwrap();
        let log = Arc::new(Mutex::new(Vec::new()));
        let shared = Arc::clone(&log);
        thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                let (mock, log) = (mock.clone(), Arc::clone(&shared));
                thread::spawn(move || mock.serve(stream, &log));
            }
        });
        Self { address, log }
    }

    fn connect(&self) -> lmzip::Result<BridgeClient> {
        BridgeClient::connect(&self.address, Duration::from_secs(10))
    }

    fn take_log(&self) -> Vec<Vec<TokenId>> {
        std::mem::take(&mut *self.log.lock().unwrap())
    }

    fn predictor(&self, memory: usize) -> PredictorSpec {
        PredictorSpec::External {
            address: self.address.clone(),
            memory,
        }
    }
}

const TEXT: &[u8] = b"the compression of the text and the  compressor, compress ion ions \xff\x00 end";

#[test]
fn handshake_reports_server_parameters() {
    let server = Server::start(Mock::new("mock-7"));
    let client = server.connect().unwrap();
    let hello = client.hello();
    assert_eq!(hello.protocol_version, PROTOCOL_VERSION);
    assert_eq!(client.vocab_size(), D as usize);
    assert_eq!(hello.pmf_total, PMF_TOTAL);
    assert_eq!(hello.max_memory, 16);
    assert_eq!(hello.model_tag, "mock-7");
}

#[test]
fn dense_and_sparse_replies_expand_identically() {
    let dense = Server::start(Mock { mode: Mode::Dense, ..Mock::new("m") });
    let sparse = Server::start(Mock { mode: Mode::Sparse, ..Mock::new("m") });
    let (mut a, mut b) = (dense.connect().unwrap(), sparse.connect().unwrap());
    for context in [vec![], vec![5], vec![1, 2, 3], vec![261; 16]] {
        let (pa, pb) = (a.predict(&context).unwrap(), b.predict(&context).unwrap());
        assert_eq!(pa, pb);
        assert_eq!(pa.weights().iter().map(|&w| u64::from(w)).sum::<u64>(), u64::from(PMF_TOTAL));
        let (listed, rest) = Mock::boosts(&context);
        assert_eq!(pb, expand_sparse(D as usize, &listed, rest).unwrap());
        for &(id, w) in &listed {
            assert_eq!(pa.weight(id), w);
        }
    }
}

#[test]
fn sparse_payload_parses_from_raw_bytes() {
    // D = 8, id 5 listed with weight 2^23, rest 2^23 over seven ids.
    let mut p = vec![1];
    put_u32s(&mut p, &[1, 5, 1 << 23, 1 << 23]);
    let pmf = parse_pmf(&p, 8).unwrap();
    let base = (1u32 << 23) / 7;
    let extra = (1u32 << 23) % 7;
    for t in 0..8u32 {
        let expected = match t {
            5 => 1 << 23,
            _ => base + u32::from(t - u32::from(t > 5) < extra),
        };
        assert_eq!(pmf.weight(t), expected, "token {t}");
    }
}

#[test]
fn tokenize_and_detokenize_round_trip() {
    let server = Server::start(Mock::new("m"));
    let mut client = server.connect().unwrap();
    let stream = client.tokenize(TEXT).unwrap();
    assert_eq!(stream.n_chars(), TEXT.len() as u64);
    assert!(stream.n_tokens() < TEXT.len(), "multi-byte tokens were used");
    assert_eq!(client.detokenize(stream.ids()).unwrap(), TEXT);
}

#[test]
fn error_frame_becomes_bridge_error() {
    let server = Server::start(Mock { fail_predict: true, ..Mock::new("m") });
    let mut client = server.connect().unwrap();
    match client.predict(&[1, 2]) {
        Err(Error::Bridge(msg)) => assert!(msg.contains("model exploded"), "{msg}"),
        other => panic!("expected a bridge error, got {other:?}"),
    }
}

#[test]
fn incompatible_servers_are_refused() {
    for mock in [
        Mock { version: PROTOCOL_VERSION + 1, ..Mock::new("m") },
        Mock { pmf_total: 1 << 16, ..Mock::new("m") },
    ] {
        let server = Server::start(mock);
        assert!(matches!(server.connect(), Err(Error::Bridge(_))));
    }
}

#[test]
fn dropped_connection_is_a_bridge_error() {
    let server = Server::start(Mock { hang_up_after: Some(3), ..Mock::new("m") });
    let mut p = BridgePredictor::new(server.connect().unwrap(), 4).unwrap();
    for t in 0..3 {
        p.predict().unwrap();
        p.update(t).unwrap();
    }
    assert!(matches!(p.predict(), Err(Error::Bridge(_))));
}

#[test]
fn memory_is_capped_by_the_server() {
    let server = Server::start(Mock::new("m"));
    assert!(matches!(BridgePredictor::new(server.connect().unwrap(), 17), Err(Error::Config(_))));
    assert_eq!(BridgePredictor::new(server.connect().unwrap(), 0).unwrap().memory(), 16);
    let mut client = server.connect().unwrap();
    assert!(matches!(client.predict(&[0; 17]), Err(Error::Bridge(_))));
}

#[test]
fn predictor_sends_the_last_m_tokens() {
    let server = Server::start(Mock::new("m"));
    let mut p = BridgePredictor::new(server.connect().unwrap(), 3).unwrap();
    for t in 10..16 {
        p.predict().unwrap();
        p.predict().unwrap();
        p.update(t).unwrap();
    }
    let log = server.take_log();
    // One request per position despite the repeated predict().
    assert_eq!(log.len(), 6);
    assert_eq!(log[0], Vec::<TokenId>::new());
    assert_eq!(log[2], vec![10, 11]);
    assert_eq!(log[5], vec![12, 13, 14]);
}

#[test]
fn external_round_trip_replays_the_same_requests() {
    let server = Server::start(Mock::new("mock-rt"));
    for codec in CodecId::ALL {
        let options = CompressOptions {
            codec,
            tokenizer: TokenizerSpec::External,
            predictor: server.predictor(5),
            ..CompressOptions::default()
        };
        let packed = compress(TEXT, &options).unwrap();
        let recorded = server.take_log();
        let header = &packed.header;
        assert_eq!(recorded.len() as u64, header.n_tokens);
        assert!(header.n_tokens < TEXT.len() as u64);
        assert_eq!(header.predictor, PredictorId::External);
        assert_eq!(header.tokenizer, TokenizerId::External);
        assert_eq!(header.memory, 5);
        assert_eq!(header.model_tag, "mock-rt");
        assert_eq!(header.vocab_digest, <[u8; 32]>::from(Sha256::digest(b"mock-rt")));

        let declared = DecompressOptions {
            predictor: Some(server.predictor(0)),
            ..DecompressOptions::default()
        };
        assert_eq!(decompress(&packed.bytes, &declared).unwrap(), TEXT, "{codec}");
        assert_eq!(server.take_log(), recorded, "{codec}: decoder asked for other contexts");
    }
}

#[test]
fn local_tokenizer_must_match_server_vocabulary() {
    let server = Server::start(Mock::new("m"));
    let options = CompressOptions {
        tokenizer: TokenizerSpec::Byte,
        predictor: server.predictor(4),
        ..CompressOptions::default()
    };
    assert!(matches!(compress(TEXT, &options), Err(Error::Config(_))));
}

#[test]
fn different_model_tag_is_a_mismatch() {
    let writer = Server::start(Mock::new("model-a"));
    let reader = Server::start(Mock::new("model-b"));
    let packed = compress(
        TEXT,
        &CompressOptions {
            tokenizer: TokenizerSpec::External,
            predictor: writer.predictor(4),
            ..CompressOptions::default()
        },
    )
    .unwrap();
    let err = decompress(
        &packed.bytes,
        &DecompressOptions {
            predictor: Some(reader.predictor(4)),
            ..DecompressOptions::default()
        },
    )
    .unwrap_err();
    assert!(matches!(err, Error::PredictorMismatch(_)), "{err}");

    // Without an address there is nothing to decode with.
    let err = decompress(&packed.bytes, &DecompressOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    // A declared memory different from the header is refused up front.
    let err = decompress(
        &packed.bytes,
        &DecompressOptions {
            predictor: Some(writer.predictor(3)),
            ..DecompressOptions::default()
        },
    )
    .unwrap_err();
    assert!(matches!(err, Error::PredictorMismatch(_)), "{err}");
}

#[test]
fn unreachable_server_is_a_bridge_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let address = BridgeAddress::parse(&format!("127.0.0.1:{port}")).unwrap();
    assert!(matches!(
        BridgeClient::connect(&address, Duration::from_secs(2)),
        Err(Error::Bridge(_))
    ));
}

#[test]
fn exec_address_speaks_over_stdio() {
    // `cat` echoes the hello request, which is not a valid server hello.
    let address = BridgeAddress::parse("exec:cat").unwrap();
    assert!(matches!(
        BridgeClient::connect(&address, Duration::from_secs(2)),
        Err(Error::Bridge(_))
    ));
}
