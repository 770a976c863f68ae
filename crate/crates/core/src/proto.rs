//! Edge ↔ cloud wire protocol.
//!
//! Every frame is
//!
//! ```text
//! "PESL" | version u8 (=1) | kind u8 | payload_len u64 LE | payload
//! ```
//!
//! Matrices travel as `rows u32 LE | cols u32 LE | rows·cols f64 LE`, row-major.
//! The cloud only ever sees handshake dimensions, shuffled features and
//! shuffled gradients; keys, labels and raw inputs never leave the edge.

use std::fs::File;
use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;

use crate::encoder::{
    stack_backward, stack_forward, BlockConfig, EncoderActivations, EncoderBlockWeights,
};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MAGIC: [u8; 4] = *b"PESL";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 14;
pub const DEFAULT_MAX_PAYLOAD: u64 = 1 << 30;

/// Error codes carried by [`Message::Error`].
pub mod codes {
    pub const HANDSHAKE: u32 = 1;
    pub const OUT_OF_ORDER: u32 = 2;
    pub const MALFORMED: u32 = 3;
    pub const INTERNAL: u32 = 4;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageKind {
    Hello = 1,
    ConfigAck = 2,
    FwdReq = 3,
    FwdResp = 4,
    BwdReq = 5,
    BwdAck = 6,
    Step = 7,
    Shutdown = 8,
    Error = 9,
}

impl MessageKind {
    fn from_byte(b: u8) -> Option<Self> {
        use MessageKind::*;
        Some(match b {
            1 => Hello,
            2 => ConfigAck,
            3 => FwdReq,
            4 => FwdResp,
            5 => BwdReq,
            6 => BwdAck,
            7 => Step,
            8 => Shutdown,
            9 => Error,
            _ => return None,
        })
    }
}

/// Model dimensions announced by the edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hello {
    pub p: u32,
    pub d: u32,
    pub n_layers: u32,
    pub n_heads: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello(Hello),
    ConfigAck,
    FwdReq(Matrix),
    FwdResp(Matrix),
    BwdReq(Matrix),
    /// Reply to `BwdReq` (carrying `∂l/∂Z′`) and to `Step` (empty).
    BwdAck(Option<Matrix>),
    Step,
    Shutdown,
    Error { code: u32, message: String },
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::Hello(_) => MessageKind::Hello,
            Message::ConfigAck => MessageKind::ConfigAck,
            Message::FwdReq(_) => MessageKind::FwdReq,
            Message::FwdResp(_) => MessageKind::FwdResp,
            Message::BwdReq(_) => MessageKind::BwdReq,
            Message::BwdAck(_) => MessageKind::BwdAck,
            Message::Step => MessageKind::Step,
            Message::Shutdown => MessageKind::Shutdown,
            Message::Error { .. } => MessageKind::Error,
        }
    }
}

fn put_matrix(out: &mut Vec<u8>, m: &Matrix) {
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(msg: &Message) -> Vec<u8> {
    let mut payload = Vec::new();
    match msg {
        Message::Hello(h) => {
            for v in [h.p, h.d, h.n_layers, h.n_heads] {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        Message::FwdReq(m) | Message::FwdResp(m) | Message::BwdReq(m) => put_matrix(&mut payload, m),
        Message::BwdAck(m) => match m {
            Some(m) => {
                payload.push(1);
                put_matrix(&mut payload, m);
            }
            None => payload.push(0),
        },
        Message::Error { code, message } => {
            payload.extend_from_slice(&code.to_le_bytes());
            payload.extend_from_slice(&(message.len() as u32).to_le_bytes());
            payload.extend_from_slice(message.as_bytes());
        }
        Message::ConfigAck | Message::Step | Message::Shutdown => {}
    }
    let mut frame = Vec::with_capacity(HEADER_LEN + payload.len());
    frame.extend_from_slice(&MAGIC);
    frame.push(VERSION);
    frame.push(msg.kind() as u8);
    frame.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    frame.extend_from_slice(&payload);
    frame
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Decode {
            offset: self.base + self.pos,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated: need {n} more bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let start = self.pos;
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Decode {
                offset: self.base + start,
                reason: format!("invalid matrix dimensions {rows}x{cols}"),
            })?;
        if (self.buf.len() - self.pos) / 8 < n {
            return Err(self.err(format!("matrix {rows}x{cols} exceeds payload")));
        }
        let bytes = self.take(n * 8)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Matrix::new(rows, cols, data).map_err(|e| Error::Decode {
            offset: self.base + start,
            reason: e.to_string(),
        })
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!("{} trailing payload bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// Parses a frame header, returning `(kind byte, payload_len)`.
fn decode_header(header: &[u8], max_payload: u64) -> Result<(u8, u64)> {
    if header.len() < HEADER_LEN {
        return Err(Error::Decode {
            offset: header.len(),
            reason: "truncated header".into(),
        });
    }
    if header[..4] != MAGIC {
        return Err(Error::Decode {
            offset: 0,
            reason: "bad magic".into(),
        });
    }
    if header[4] != VERSION {
        return Err(Error::Decode {
            offset: 4,
            reason: format!("unsupported version {}", header[4]),
        });
    }
    let len = u64::from_le_bytes(header[6..14].try_into().expect("8 bytes"));
    if len > max_payload {
        return Err(Error::Decode {
            offset: 6,
            reason: format!("payload length {len} exceeds cap {max_payload}"),
        });
    }
    Ok((header[5], len))
}

fn decode_payload(kind: u8, payload: &[u8]) -> Result<Message> {
    let kind = MessageKind::from_byte(kind).ok_or_else(|| Error::Decode {
        offset: 5,
        reason: format!("unknown message kind {kind}"),
    })?;
    let mut c = Cursor {
        buf: payload,
        pos: 0,
        base: HEADER_LEN,
    };
    let msg = match kind {
        MessageKind::Hello => Message::Hello(Hello {
            p: c.u32()?,
            d: c.u32()?,
            n_layers: c.u32()?,
            n_heads: c.u32()?,
        }),
        MessageKind::ConfigAck => Message::ConfigAck,
        MessageKind::FwdReq => Message::FwdReq(c.matrix()?),
        MessageKind::FwdResp => Message::FwdResp(c.matrix()?),
        MessageKind::BwdReq => Message::BwdReq(c.matrix()?),
        MessageKind::BwdAck => match c.u8()? {
            0 => Message::BwdAck(None),
            1 => Message::BwdAck(Some(c.matrix()?)),
            t => return Err(c.err(format!("bad BWD_ACK tag {t}"))),
        },
        MessageKind::Step => Message::Step,
        MessageKind::Shutdown => Message::Shutdown,
        MessageKind::Error => {
            let code = c.u32()?;
            let n = c.u32()? as usize;
            let text = c.take(n)?;
            let message = String::from_utf8(text.to_vec()).map_err(|_| c.err("error text is not UTF-8"))?;
            Message::Error { code, message }
        }
    };
    c.finish()?;
    Ok(msg)
}

/// Decodes one frame from the front of `bytes`, returning it and the number
/// of bytes consumed.
pub fn decode_with_cap(bytes: &[u8], max_payload: u64) -> Result<(Message, usize)> {
    let (kind, len) = decode_header(bytes, max_payload)?;
    let len = usize::try_from(len).map_err(|_| Error::Decode {
        offset: 6,
        reason: "payload length overflows usize".into(),
    })?;
    let end = HEADER_LEN.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::Decode {
        offset: bytes.len(),
        reason: format!("truncated payload: declared {len} bytes"),
    })?;
    Ok((decode_payload(kind, &bytes[HEADER_LEN..end])?, end))
}

pub fn decode(bytes: &[u8]) -> Result<(Message, usize)> {
    decode_with_cap(bytes, DEFAULT_MAX_PAYLOAD)
}

/// Reads one frame. `Ok(None)` on a clean end of stream before any header byte.
pub fn read_frame(r: &mut impl Read, max_payload: u64) -> Result<Option<Vec<u8>>> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => {
                return Err(Error::Decode {
                    offset: got,
                    reason: "stream ended inside header".into(),
                })
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let (_, len) = decode_header(&header, max_payload)?;
    let mut frame = header.to_vec();
    frame.resize(HEADER_LEN + len as usize, 0);
    r.read_exact(&mut frame[HEADER_LEN..]).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Decode {
            offset: HEADER_LEN,
            reason: format!("stream ended inside {len}-byte payload"),
        },
        _ => e.into(),
    })?;
    Ok(Some(frame))
}

pub fn read_message(r: &mut impl Read, max_payload: u64) -> Result<Option<Message>> {
    match read_frame(r, max_payload)? {
        Some(frame) => Ok(Some(decode_with_cap(&frame, max_payload)?.0)),
        None => Ok(None),
    }
}

pub fn write_message(w: &mut impl Write, msg: &Message) -> Result<()> {
    w.write_all(&encode(msg))?;
    w.flush()?;
    Ok(())
}

/// The cloud's half of a session: owns F₂ and its optimiser.
#[derive(Debug, Clone)]
pub struct CloudServer {
    blocks: Vec<EncoderBlockWeights>,
    cfg: BlockConfig,
    lr: f64,
    handshake: Option<Hello>,
    cache: Option<Vec<EncoderActivations>>,
    accum: Option<Vec<EncoderBlockWeights>>,
    forwards: usize,
    /// Test hook: reply SHUTDOWN instead of serving this forward request (0-based).
    pub shutdown_at_forward: Option<usize>,
}

/// What the server wants done after handling a message.
#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub message: Option<Message>,
    pub close: bool,
}

impl Reply {
    fn send(message: Message) -> Self {
        Self {
            message: Some(message),
            close: false,
        }
    }

    fn error(code: u32, message: impl Into<String>) -> Self {
        Self {
            message: Some(Message::Error {
                code,
                message: message.into(),
            }),
            close: false,
        }
    }
}

impl CloudServer {
    pub fn new(blocks: Vec<EncoderBlockWeights>, cfg: BlockConfig, lr: f64) -> Result<Self> {
        let d = blocks
            .first()
            .ok_or_else(|| Error::config("n_layers", "cloud has no blocks"))?
            .d();
        for b in &blocks {
            b.validate()?;
            if b.d() != d {
                return Err(Error::shape("CloudServer::new", (d, d), (b.d(), b.d())));
            }
        }
        cfg.validate(d)?;
        Ok(Self {
            blocks,
            cfg,
            lr,
            handshake: None,
            cache: None,
            accum: None,
            forwards: 0,
            shutdown_at_forward: None,
        })
    }

    pub fn blocks(&self) -> &[EncoderBlockWeights] {
        &self.blocks
    }

    pub fn into_blocks(self) -> Vec<EncoderBlockWeights> {
        self.blocks
    }

    pub fn d(&self) -> usize {
        self.blocks[0].d()
    }

    /// Drops per-connection state; weights persist.
    pub fn reset_session(&mut self) {
        self.handshake = None;
        self.cache = None;
        self.accum = None;
    }

    pub fn handle(&mut self, msg: Message) -> Reply {
        match self.dispatch(msg) {
            Ok(r) => r,
            Err(e) => Reply::error(codes::INTERNAL, e.to_string()),
        }
    }

    fn dispatch(&mut self, msg: Message) -> Result<Reply> {
        if !matches!(msg, Message::Hello(_) | Message::Shutdown) && self.handshake.is_none() {
            return Ok(Reply::error(codes::OUT_OF_ORDER, "HELLO required first"));
        }
        match msg {
            Message::Hello(h) => {
                let ok = h.d as usize == self.d()
                    && h.n_layers as usize == self.blocks.len()
                    && h.n_heads as usize == self.cfg.n_heads
                    && h.p > 0;
                if !ok {
                    return Ok(Reply::error(
                        codes::HANDSHAKE,
                        format!(
                            "cloud has d={}, n_layers={}, n_heads={}; edge sent {h:?}",
                            self.d(),
                            self.blocks.len(),
                            self.cfg.n_heads
                        ),
                    ));
                }
                self.reset_session();
                self.handshake = Some(h);
                Ok(Reply::send(Message::ConfigAck))
            }
            Message::FwdReq(z) => {
                let h = self.handshake.expect("checked above");
                if z.shape() != (h.p as usize, h.d as usize) {
                    return Ok(Reply::error(
                        codes::MALFORMED,
                        format!("feature {:?} does not match handshake ({}, {})", z.shape(), h.p, h.d),
                    ));
                }
                if self.shutdown_at_forward == Some(self.forwards) {
                    return Ok(Reply {
                        message: Some(Message::Shutdown),
                        close: true,
                    });
                }
                self.forwards += 1;
                let (y, acts) = stack_forward(&self.blocks, &self.cfg, &z)?;
                self.cache = Some(acts);
                Ok(Reply::send(Message::FwdResp(y)))
            }
            Message::BwdReq(g) => {
                let Some(acts) = self.cache.take() else {
                    return Ok(Reply::error(codes::OUT_OF_ORDER, "BWD_REQ without a matching FWD_REQ"));
                };
                if g.shape() != acts[acts.len() - 1].out.shape() {
                    return Ok(Reply::error(codes::MALFORMED, "gradient shape does not match the cached forward"));
                }
                let grads = stack_backward(&self.blocks, &self.cfg, &acts, &g)?;
                match &mut self.accum {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads.blocks) {
                            a.axpy(1.0, g)?;
                        }
                    }
                    None => self.accum = Some(grads.blocks),
                }
                Ok(Reply::send(Message::BwdAck(Some(grads.d_z))))
            }
            Message::Step => {
                if let Some(acc) = self.accum.take() {
                    for (w, g) in self.blocks.iter_mut().zip(&acc) {
                        w.sgd_step(g, self.lr)?;
                    }
                }
                self.cache = None;
                Ok(Reply::send(Message::BwdAck(None)))
            }
            Message::Shutdown => Ok(Reply {
                message: None,
                close: true,
            }),
            other => Ok(Reply::error(
                codes::OUT_OF_ORDER,
                format!("unexpected {:?} from edge", other.kind()),
            )),
        }
    }
}

/// Serves connections one at a time. Returns after `max_sessions` sessions
/// when given, otherwise runs until the listener fails.
pub fn run_cloud(listener: &TcpListener, server: &mut CloudServer, max_sessions: Option<usize>) -> Result<()> {
    let mut served = 0;
    while max_sessions.is_none_or(|m| served < m) {
        let (stream, _) = listener.accept()?;
        served += 1;
        server.reset_session();
        // A broken session must not take the server down.
        if let Err(e) = serve_session(stream, server) {
            log_session_error(&e);
        }
    }
    Ok(())
}

fn log_session_error(e: &Error) {
    eprintln!("cloud: session ended with error: {e}");
}

fn serve_session(mut stream: TcpStream, server: &mut CloudServer) -> Result<()> {
    stream.set_nodelay(true)?;
    loop {
        let msg = match read_message(&mut stream, DEFAULT_MAX_PAYLOAD) {
            Ok(Some(m)) => m,
            Ok(None) => return Ok(()),
            Err(e @ Error::Decode { .. }) => {
                let reply = Message::Error {
                    code: codes::MALFORMED,
                    message: e.to_string(),
                };
                let _ = write_message(&mut stream, &reply);
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let reply = server.handle(msg);
        if let Some(m) = &reply.message {
            write_message(&mut stream, m)?;
        }
        if reply.close {
            return Ok(());
        }
    }
}

/// Edge-side carrier of frames to the cloud.
pub trait Transport {
    /// Sends a request and waits for the reply.
    fn request(&mut self, msg: &Message) -> Result<Message>;
    /// Sends a message that has no reply (SHUTDOWN).
    fn notify(&mut self, msg: &Message) -> Result<()>;
}

/// In-process transport. Every frame still goes through [`encode`] and
/// [`decode`], so it is bit-identical to a socket.
#[derive(Debug, Clone)]
pub struct LoopbackTransport {
    server: CloudServer,
}

impl LoopbackTransport {
    pub fn new(server: CloudServer) -> Self {
        Self { server }
    }

    pub fn server(&self) -> &CloudServer {
        &self.server
    }

    pub fn server_mut(&mut self) -> &mut CloudServer {
        &mut self.server
    }

    pub fn into_server(self) -> CloudServer {
        self.server
    }

    fn deliver(&mut self, msg: &Message) -> Result<Option<Message>> {
        let (wire, _) = decode(&encode(msg))?;
        match self.server.handle(wire).message {
            Some(reply) => Ok(Some(decode(&encode(&reply))?.0)),
            None => Ok(None),
        }
    }
}

impl Transport for LoopbackTransport {
    fn request(&mut self, msg: &Message) -> Result<Message> {
        self.deliver(msg)?.ok_or_else(|| Error::Protocol {
            code: codes::OUT_OF_ORDER,
            message: "cloud closed without reply".into(),
        })
    }

    fn notify(&mut self, msg: &Message) -> Result<()> {
        self.deliver(msg).map(|_| ())
    }
}

/// TCP transport, optionally dumping every outgoing frame to a capture file.
#[derive(Debug)]
pub struct TcpTransport {
    stream: TcpStream,
    capture: Option<File>,
}

impl TcpTransport {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            stream,
            capture: None,
        })
    }

    pub fn with_capture(mut self, path: impl AsRef<Path>) -> Result<Self> {
        self.capture = Some(File::create(path)?);
        Ok(self)
    }

    fn send(&mut self, msg: &Message) -> Result<()> {
        let frame = encode(msg);
        if let Some(f) = &mut self.capture {
            f.write_all(&frame)?;
        }
        self.stream.write_all(&frame)?;
        self.stream.flush()?;
        Ok(())
    }
}

impl Transport for TcpTransport {
    fn request(&mut self, msg: &Message) -> Result<Message> {
        self.send(msg)?;
        read_message(&mut self.stream, DEFAULT_MAX_PAYLOAD)?.ok_or_else(|| {
            Error::Io(io::Error::new(io::ErrorKind::UnexpectedEof, "cloud closed the connection"))
        })
    }

    fn notify(&mut self, msg: &Message) -> Result<()> {
        self.send(msg)
    }
}

/// Wraps a transport and keeps a copy of every frame the edge sends.
#[derive(Debug)]
pub struct RecordingTransport<T> {
    inner: T,
    sent: Vec<Vec<u8>>,
}

impl<T: Transport> RecordingTransport<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            sent: Vec::new(),
        }
    }

    pub fn sent_frames(&self) -> &[Vec<u8>] {
        &self.sent
    }

    pub fn inner(&self) -> &T {
        &self.inner
    }

    pub fn into_inner(self) -> T {
        self.inner
    }
}

impl<T: Transport> Transport for RecordingTransport<T> {
    fn request(&mut self, msg: &Message) -> Result<Message> {
        self.sent.push(encode(msg));
        self.inner.request(msg)
    }

    fn notify(&mut self, msg: &Message) -> Result<()> {
        self.sent.push(encode(msg));
        self.inner.notify(msg)
    }
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn request(&mut self, msg: &Message) -> Result<Message> {
        (**self).request(msg)
    }

    fn notify(&mut self, msg: &Message) -> Result<()> {
        (**self).notify(msg)
    }
}

/// Kinds the edge is allowed to put on the wire.
pub const EDGE_WHITELIST: [MessageKind; 5] = [
    MessageKind::Hello,
    MessageKind::FwdReq,
    MessageKind::BwdReq,
    MessageKind::Step,
    MessageKind::Shutdown,
];

/// Typed request/response helpers over a [`Transport`].
#[derive(Debug)]
pub struct RemoteCloud<T> {
    transport: T,
}

fn unexpected(reply: Message, wanted: &str) -> Error {
    match reply {
        Message::Error { code, message } => Error::Protocol { code, message },
        Message::Shutdown => Error::RemoteShutdown { step: 0 },
        other => Error::Protocol {
            code: codes::OUT_OF_ORDER,
            message: format!("expected {wanted}, got {:?}", other.kind()),
        },
    }
}

impl<T: Transport> RemoteCloud<T> {
    pub fn new(transport: T) -> Self {
        Self { transport }
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn transport_mut(&mut self) -> &mut T {
        &mut self.transport
    }

    pub fn into_transport(self) -> T {
        self.transport
    }

    pub fn handshake(&mut self, hello: Hello) -> Result<()> {
        match self.transport.request(&Message::Hello(hello))? {
            Message::ConfigAck => Ok(()),
            Message::Error { message, .. } => Err(Error::Handshake(message)),
            other => Err(unexpected(other, "CONFIG_ACK")),
        }
    }

    pub fn forward(&mut self, z: &Matrix) -> Result<Matrix> {
        match self.transport.request(&Message::FwdReq(z.clone()))? {
            Message::FwdResp(y) => Ok(y),
            other => Err(unexpected(other, "FWD_RESP")),
        }
    }

    pub fn backward(&mut self, g: &Matrix) -> Result<Matrix> {
        match self.transport.request(&Message::BwdReq(g.clone()))? {
            Message::BwdAck(Some(dz)) => Ok(dz),
            other => Err(unexpected(other, "BWD_ACK with gradient")),
        }
    }

    pub fn step(&mut self) -> Result<()> {
        match self.transport.request(&Message::Step)? {
            Message::BwdAck(None) => Ok(()),
            other => Err(unexpected(other, "BWD_ACK")),
        }
    }

    pub fn shutdown(&mut self) -> Result<()> {
        self.transport.notify(&Message::Shutdown)
    }
}
