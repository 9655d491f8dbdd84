//! Client for an external next-token predictor.
//!
//! Frames on the wire are `len: u32 | type: u8 | payload`, where `len`
//! counts the type byte and the payload. All integers are little-endian.
//!
//! | type | direction | payload |
//! |------|-----------|---------|
//! | 0x01 | client → server | `version: u16` |
//! | 0x01 | server → client | `version: u16, D: u32, pmf_total: u32, max_memory: u32, tag_len: u32, tag` |
//! | 0x02 | client → server | `n: u32, n × id: u32` (oldest first) |
//! | 0x03 | server → client | `0: u8, D × weight: u32` or `1: u8, count: u32, count × (id: u32, weight: u32), rest: u32` |
//! | 0x04 | client → server | raw text bytes |
//! | 0x04 | server → client | `n: u32, n × id: u32, n × byte_len: u32` |
//! | 0x05 | client → server | `n: u32, n × id: u32` |
//! | 0x05 | server → client | raw text bytes |
//! | 0x7f | server → client | UTF-8 error message |
//!
//! A sparse response spreads `rest` over the unlisted ids by floor
//! division, the remainder going one unit each to the lowest unlisted ids.
//! The client never alters weights in any other way.

use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::time::Duration;

use crate::error::{Error, Result};
use crate::predictor::{check_token, Predictor, QuantizedPmf, PMF_TOTAL};
use crate::token::{TokenId, TokenStream};

pub const PROTOCOL_VERSION: u16 = 1;
pub const ENV_ADDR: &str = "LMZIP_BRIDGE_ADDR";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);
/// Largest frame either side will accept.
pub const MAX_FRAME_LEN: u32 = 1 << 28;

pub const FRAME_HELLO: u8 = 0x01;
pub const FRAME_PREDICT: u8 = 0x02;
pub const FRAME_PMF: u8 = 0x03;
pub const FRAME_TOKENIZE: u8 = 0x04;
pub const FRAME_DETOKENIZE: u8 = 0x05;
pub const FRAME_ERROR: u8 = 0x7f;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(kind: u8, payload: Vec<u8>) -> Self {
        Self { kind, payload }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + self.payload.len());
        out.extend_from_slice(&(self.payload.len() as u32 + 1).to_le_bytes());
        out.push(self.kind);
        out.extend_from_slice(&self.payload);
        out
    }
}

fn io_error(e: io::Error) -> Error {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => Error::bridge("timed out waiting for the server"),
        io::ErrorKind::UnexpectedEof => Error::bridge("connection closed mid-frame"),
        _ => Error::bridge(format!("i/o error: {e}")),
    }
}

pub fn write_frame<W: Write + ?Sized>(w: &mut W, frame: &Frame) -> Result<()> {
    w.write_all(&frame.to_bytes()).map_err(io_error)?;
    w.flush().map_err(io_error)
}

/// Reads one whole frame. Returns `Ok(None)` on a clean end of stream
/// before the length prefix.
pub fn read_frame<R: Read + ?Sized>(r: &mut R) -> Result<Option<Frame>> {
    let mut len = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match r.read(&mut len[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(Error::bridge("connection closed mid-frame")),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(io_error(e)),
        }
    }
    let len = u32::from_le_bytes(len);
    if len == 0 || len > MAX_FRAME_LEN {
        return Err(Error::bridge(format!("malformed frame length {len}")));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body).map_err(io_error)?;
    let kind = body[0];
    body.remove(0);
    Ok(Some(Frame { kind, payload: body }))
}

/// Cursor over a frame payload; running short is a malformed frame.
pub struct PayloadReader<'a>(&'a [u8]);

impl<'a> PayloadReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self(bytes)
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.0.len() < n {
            return Err(Error::bridge("malformed frame: payload too short"));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::bridge("malformed frame"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn rest(&mut self) -> &'a [u8] {
        std::mem::take(&mut self.0)
    }

    pub fn finish(self) -> Result<()> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(Error::bridge("malformed frame: trailing bytes"))
        }
    }
}

pub fn put_u32s(out: &mut Vec<u8>, values: &[u32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerHello {
    pub protocol_version: u16,
    pub vocab_size: u32,
    pub pmf_total: u32,
    pub max_memory: u32,
    pub model_tag: String,
}

impl ServerHello {
    pub fn to_frame(&self) -> Frame {
        let mut p = Vec::new();
        p.extend_from_slice(&self.protocol_version.to_le_bytes());
        put_u32s(&mut p, &[self.vocab_size, self.pmf_total, self.max_memory]);
        p.extend_from_slice(&(self.model_tag.len() as u32).to_le_bytes());
        p.extend_from_slice(self.model_tag.as_bytes());
        Frame::new(FRAME_HELLO, p)
    }

    pub fn parse(payload: &[u8]) -> Result<Self> {
        let mut r = PayloadReader::new(payload);
        let protocol_version = r.u16()?;
        let vocab_size = r.u32()?;
        let pmf_total = r.u32()?;
        let max_memory = r.u32()?;
        let tag_len = r.u32()? as usize;
        let model_tag = String::from_utf8(r.take(tag_len)?.to_vec())
            .map_err(|_| Error::bridge("model tag is not UTF-8"))?;
        r.finish()?;
        Ok(Self {
            protocol_version,
            vocab_size,
            pmf_total,
            max_memory,
            model_tag,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.protocol_version != PROTOCOL_VERSION {
            return Err(Error::bridge(format!(
                "server speaks protocol {}, client speaks {PROTOCOL_VERSION}",
                self.protocol_version
            )));
        }
        if self.pmf_total != PMF_TOTAL {
            return Err(Error::bridge(format!(
                "server pmf_total {} differs from {PMF_TOTAL}",
                self.pmf_total
            )));
        }
        if self.vocab_size < 2 || self.vocab_size > PMF_TOTAL / 2 {
            return Err(Error::bridge(format!("unusable vocabulary size {}", self.vocab_size)));
        }
        Ok(())
    }
}

pub fn hello_request() -> Frame {
    Frame::new(FRAME_HELLO, PROTOCOL_VERSION.to_le_bytes().to_vec())
}

pub fn predict_request(context: &[TokenId]) -> Frame {
    let mut p = Vec::with_capacity(4 + 4 * context.len());
    p.extend_from_slice(&(context.len() as u32).to_le_bytes());
    put_u32s(&mut p, context);
    Frame::new(FRAME_PREDICT, p)
}

/// Expands `rest` over the ids missing from `listed`.
pub fn expand_sparse(vocab_size: usize, listed: &[(u32, u32)], rest: u32) -> Result<QuantizedPmf> {
    let mut weights = vec![0u32; vocab_size];
    let mut sum = u64::from(rest);
    let mut prev: Option<u32> = None;
    for &(id, w) in listed {
        if prev.is_some_and(|p| id <= p) {
            return Err(Error::bridge("sparse ids are not strictly increasing"));
        }
        if id as usize >= vocab_size {
            return Err(Error::bridge(format!("sparse id {id} outside vocabulary")));
        }
        if w == 0 {
            return Err(Error::bridge(format!("sparse id {id} has zero weight")));
        }
        weights[id as usize] = w;
        sum += u64::from(w);
        prev = Some(id);
    }
    if sum != u64::from(PMF_TOTAL) {
        return Err(Error::bridge(format!("sparse weights sum to {sum}, expected {PMF_TOTAL}")));
    }
    let unlisted = (vocab_size - listed.len()) as u32;
    match rest.checked_div(unlisted) {
        None if rest != 0 => return Err(Error::bridge("rest weight with no unlisted ids")),
        None => {}
        Some(0) => return Err(Error::bridge("rest weight leaves an unlisted id at zero")),
        Some(base) => {
            let mut extra = rest % unlisted;
            for w in weights.iter_mut().filter(|w| **w == 0) {
                *w = base + u32::from(extra > 0);
                extra = extra.saturating_sub(1);
            }
        }
    }
    QuantizedPmf::new(weights).map_err(|e| Error::bridge(e.to_string()))
}

/// Parses a 0x03 payload.
pub fn parse_pmf(payload: &[u8], vocab_size: usize) -> Result<QuantizedPmf> {
    let mut r = PayloadReader::new(payload);
    let pmf = match r.u8()? {
        0 => {
            let weights = r.u32s(vocab_size)?;
            QuantizedPmf::new(weights).map_err(|e| Error::bridge(e.to_string()))?
        }
        1 => {
            let count = r.u32()? as usize;
            if count > vocab_size {
                return Err(Error::bridge("sparse count exceeds vocabulary"));
            }
            let flat = r.u32s(2 * count)?;
            let listed: Vec<(u32, u32)> = flat.chunks_exact(2).map(|c| (c[0], c[1])).collect();
            let rest = r.u32()?;
            expand_sparse(vocab_size, &listed, rest)?
        }
        m => return Err(Error::bridge(format!("unknown pmf mode {m}"))),
    };
    r.finish()?;
    Ok(pmf)
}

trait Stream: Read + Write + Send {}
impl<T: Read + Write + Send> Stream for T {}

struct ChildPipe {
    child: Child,
    stdin: ChildStdin,
    stdout: ChildStdout,
}

impl Read for ChildPipe {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        self.stdout.read(buf)
    }
}

impl Write for ChildPipe {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.stdin.write(buf)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.stdin.flush()
    }
}

impl Drop for ChildPipe {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Where to find the server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BridgeAddress {
    /// `host:port` or `tcp://host:port`.
    Tcp(String),
    /// `exec:COMMAND`, run through `sh -c` and spoken to over stdio.
    Exec(String),
}

impl BridgeAddress {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(cmd) = s.strip_prefix("exec:") {
            if cmd.trim().is_empty() {
                return Err(Error::Config("empty exec command".into()));
            }
            return Ok(Self::Exec(cmd.to_string()));
        }
        let hostport = s.strip_prefix("tcp://").unwrap_or(s);
        if hostport.rsplit_once(':').is_none_or(|(h, p)| h.is_empty() || p.parse::<u16>().is_err()) {
            return Err(Error::Config(format!("bridge address {s:?} is not host:port or exec:COMMAND")));
        }
        Ok(Self::Tcp(hostport.to_string()))
    }
}

pub struct BridgeClient {
    stream: Box<dyn Stream>,
    hello: ServerHello,
}

impl std::fmt::Debug for BridgeClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BridgeClient").field("hello", &self.hello).finish_non_exhaustive()
    }
}

impl BridgeClient {
    pub fn connect(address: &BridgeAddress, timeout: Duration) -> Result<Self> {
        match address {
            BridgeAddress::Tcp(hostport) => {
                let addrs: Vec<_> = hostport
                    .to_socket_addrs()
                    .map_err(|e| Error::bridge(format!("cannot resolve {hostport}: {e}")))?
                    .collect();
                let mut last = None;
                for addr in addrs {
                    match TcpStream::connect_timeout(&addr, timeout) {
                        Ok(s) => {
                            s.set_read_timeout(Some(timeout)).map_err(io_error)?;
                            s.set_write_timeout(Some(timeout)).map_err(io_error)?;
                            s.set_nodelay(true).map_err(io_error)?;
                            return Self::handshake(Box::new(s));
                        }
                        Err(e) => last = Some(e),
                    }
                }
                Err(Error::bridge(format!(
                    "cannot connect to {hostport}: {}",
                    last.map_or("no addresses".to_string(), |e| e.to_string())
                )))
            }
            BridgeAddress::Exec(cmd) => {
                let mut child = Command::new("sh")
                    .arg("-c")
                    .arg(cmd)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .spawn()
                    .map_err(|e| Error::bridge(format!("cannot start {cmd:?}: {e}")))?;
                let stdin = child.stdin.take().expect("piped");
                let stdout = child.stdout.take().expect("piped");
                Self::handshake(Box::new(ChildPipe { child, stdin, stdout }))
            }
        }
    }

    /// Speaks the protocol over an already open byte stream.
    pub fn over<S: Read + Write + Send + 'static>(stream: S) -> Result<Self> {
        Self::handshake(Box::new(stream))
    }

    fn handshake(mut stream: Box<dyn Stream>) -> Result<Self> {
        write_frame(&mut stream, &hello_request())?;
        let frame = Self::expect(&mut stream, FRAME_HELLO)?;
        let hello = ServerHello::parse(&frame.payload)?;
        hello.validate()?;
        Ok(Self { stream, hello })
    }

    fn expect(stream: &mut Box<dyn Stream>, kind: u8) -> Result<Frame> {
        let frame = read_frame(stream)?.ok_or_else(|| Error::bridge("server closed the connection"))?;
        if frame.kind == FRAME_ERROR {
            return Err(Error::bridge(format!(
                "server error: {}",
                String::from_utf8_lossy(&frame.payload)
            )));
        }
        if frame.kind != kind {
            return Err(Error::bridge(format!(
                "expected frame 0x{kind:02x}, got 0x{:02x}",
                frame.kind
            )));
        }
        Ok(frame)
    }

    fn call(&mut self, request: &Frame, reply: u8) -> Result<Frame> {
        write_frame(&mut self.stream, request)?;
        Self::expect(&mut self.stream, reply)
    }

    pub fn hello(&self) -> &ServerHello {
        &self.hello
    }

    pub fn vocab_size(&self) -> usize {
        self.hello.vocab_size as usize
    }

    pub fn predict(&mut self, context: &[TokenId]) -> Result<QuantizedPmf> {
        if context.len() > self.hello.max_memory as usize {
            return Err(Error::bridge(format!(
                "context of {} tokens exceeds server memory {}",
                context.len(),
                self.hello.max_memory
            )));
        }
        let frame = self.call(&predict_request(context), FRAME_PMF)?;
        parse_pmf(&frame.payload, self.vocab_size())
    }

    pub fn tokenize(&mut self, text: &[u8]) -> Result<TokenStream> {
        let frame = self.call(&Frame::new(FRAME_TOKENIZE, text.to_vec()), FRAME_TOKENIZE)?;
        let mut r = PayloadReader::new(&frame.payload);
        let n = r.u32()? as usize;
        let ids = r.u32s(n)?;
        let lens = r.u32s(n)?;
        r.finish()?;
        let mut stream = TokenStream::new();
        for (&id, &len) in ids.iter().zip(&lens) {
            if id as usize >= self.vocab_size() || len == 0 {
                return Err(Error::bridge(format!("bad token ({id}, {len}) from tokenizer")));
            }
            stream.push(id, len);
        }
        if stream.n_chars() != text.len() as u64 {
            return Err(Error::bridge(format!(
                "tokenizer covered {} of {} bytes",
                stream.n_chars(),
                text.len()
            )));
        }
        Ok(stream)
    }

    pub fn detokenize(&mut self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut p = Vec::with_capacity(4 + 4 * ids.len());
        p.extend_from_slice(&(ids.len() as u32).to_le_bytes());
        put_u32s(&mut p, ids);
        Ok(self.call(&Frame::new(FRAME_DETOKENIZE, p), FRAME_DETOKENIZE)?.payload)
    }
}

/// A remote model conditioned on the last `memory` tokens.
#[derive(Debug)]
pub struct BridgePredictor {
    client: BridgeClient,
    memory: usize,
    window: VecDeque<TokenId>,
    cached: Option<QuantizedPmf>,
}

impl BridgePredictor {
    /// `memory = 0` means the server's advertised maximum.
    pub fn new(client: BridgeClient, memory: usize) -> Result<Self> {
        let max = client.hello().max_memory as usize;
        let memory = if memory == 0 { max } else { memory };
        if memory > max {
            return Err(Error::Config(format!(
                "memory {memory} exceeds the server maximum of {max}"
            )));
        }
        Ok(Self {
            client,
            memory,
            window: VecDeque::with_capacity(memory.min(1 << 16)),
            cached: None,
        })
    }

    pub fn memory(&self) -> usize {
        self.memory
    }

    pub fn client(&self) -> &BridgeClient {
        &self.client
    }

    pub fn client_mut(&mut self) -> &mut BridgeClient {
        &mut self.client
    }

    pub fn into_client(self) -> BridgeClient {
        self.client
    }
}

impl Predictor for BridgePredictor {
    fn vocab_size(&self) -> usize {
        self.client.vocab_size()
    }

    fn predict(&mut self) -> Result<&QuantizedPmf> {
        if self.cached.is_none() {
            let context: Vec<TokenId> = self.window.iter().copied().collect();
            self.cached = Some(self.client.predict(&context)?);
        }
        Ok(self.cached.as_ref().expect("filled above"))
    }

    fn update(&mut self, actual: TokenId) -> Result<()> {
        check_token(actual, self.vocab_size())?;
        if self.memory > 0 {
            if self.window.len() == self.memory {
                self.window.pop_front();
            }
            self.window.push_back(actual);
        }
        self.cached = None;
        Ok(())
    }
}
