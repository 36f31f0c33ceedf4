//! Binary framing for the store protocol.
//!
//! Every frame is `magic (0x49) | kind (u8) | payload_len (u32 LE) | payload`.
//! All integers are little-endian; parameters travel as `f32`, weights and
//! timestamps as `f64`.

use std::io::{self, Read, Write};

use crate::sampler::{StalenessFilter, WeightEntry};

use super::{ParamsSnapshot, WorkerStatus};

pub const MAGIC: u8 = 0x49;
pub const HEADER_LEN: usize = 6;
/// Largest accepted payload.
pub const MAX_PAYLOAD: usize = 1 << 30;

pub mod kind {
    pub const PUT_PARAMS: u8 = 0x01;
    pub const GET_PARAMS: u8 = 0x02;
    pub const PUT_WEIGHTS: u8 = 0x03;
    pub const GET_WEIGHTS: u8 = 0x04;
    pub const PUT_WORKER_STATUS: u8 = 0x05;
    pub const GET_WORKER_STATUS: u8 = 0x06;
    pub const OK: u8 = 0x80;
    pub const PARAMS: u8 = 0x82;
    pub const WEIGHTS: u8 = 0x84;
    pub const WORKER_STATUS: u8 = 0x86;
    pub const ERROR: u8 = 0x7F;
}

const FILTER_ALL: u8 = 0;
const FILTER_MAX_AGE: u8 = 1;
const FILTER_EXACT_VERSION: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCode {
    StaleVersion,
    IndexOutOfRange,
    InvalidWeight,
    InvalidParams,
    Protocol,
    Other(u32),
}

impl ErrorCode {
    pub fn to_u32(self) -> u32 {
        match self {
            ErrorCode::StaleVersion => 1,
            ErrorCode::IndexOutOfRange => 2,
            ErrorCode::InvalidWeight => 3,
            ErrorCode::InvalidParams => 4,
            ErrorCode::Protocol => 5,
            ErrorCode::Other(c) => c,
        }
    }

    pub fn from_u32(c: u32) -> Self {
        match c {
            1 => ErrorCode::StaleVersion,
            2 => ErrorCode::IndexOutOfRange,
            3 => ErrorCode::InvalidWeight,
            4 => ErrorCode::InvalidParams,
            5 => ErrorCode::Protocol,
            c => ErrorCode::Other(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    PutParams(ParamsSnapshot),
    GetParams,
    /// Reply to `GetParams`; version 0 means no parameters stored yet.
    Params(ParamsSnapshot),
    PutWeights { param_version: u64, entries: Vec<(u32, f64)> },
    GetWeights(StalenessFilter),
    Weights(Vec<WeightEntry<f64>>),
    PutWorkerStatus(WorkerStatus),
    GetWorkerStatus,
    WorkerStatuses(Vec<WorkerStatus>),
    Ok,
    Error { code: u32, text: String },
}

impl Message {
    pub fn kind(&self) -> u8 {
        match self {
            Message::PutParams(_) => kind::PUT_PARAMS,
            Message::GetParams => kind::GET_PARAMS,
            Message::Params(_) => kind::PARAMS,
            Message::PutWeights { .. } => kind::PUT_WEIGHTS,
            Message::GetWeights(_) => kind::GET_WEIGHTS,
            Message::Weights(_) => kind::WEIGHTS,
            Message::PutWorkerStatus(_) => kind::PUT_WORKER_STATUS,
            Message::GetWorkerStatus => kind::GET_WORKER_STATUS,
            Message::WorkerStatuses(_) => kind::WORKER_STATUS,
            Message::Ok => kind::OK,
            Message::Error { .. } => kind::ERROR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProtocolErrorKind {
    #[error("truncated frame")]
    Truncated,
    #[error("bad magic byte 0x{0:02x}")]
    BadMagic(u8),
    #[error("unknown message kind 0x{0:02x}")]
    UnknownKind(u8),
    #[error("payload length {declared} does not match {actual} bytes present")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("protocol error at byte {offset}: {kind}")]
pub struct ProtocolError {
    pub offset: usize,
    pub kind: ProtocolErrorKind,
}

impl ProtocolError {
    fn at(offset: usize, kind: ProtocolErrorKind) -> Self {
        Self { offset, kind }
    }
}

fn put_snapshot(out: &mut Vec<u8>, s: &ParamsSnapshot) {
    out.extend_from_slice(&s.version.to_le_bytes());
    out.extend_from_slice(&(s.shapes.len() as u16).to_le_bytes());
    for &(i, o) in &s.shapes {
        out.extend_from_slice(&i.to_le_bytes());
        out.extend_from_slice(&o.to_le_bytes());
    }
    out.reserve(s.params.len() * 4);
    for v in &s.params {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn payload(msg: &Message) -> Vec<u8> {
    let mut out = Vec::new();
    match msg {
        Message::PutParams(s) | Message::Params(s) => put_snapshot(&mut out, s),
        Message::GetParams | Message::GetWorkerStatus | Message::Ok => {}
        Message::PutWeights { param_version, entries } => {
            out.extend_from_slice(&param_version.to_le_bytes());
            out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
            for &(i, w) in entries {
                out.extend_from_slice(&i.to_le_bytes());
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        Message::GetWeights(filter) => match *filter {
            StalenessFilter::All => {
                out.push(FILTER_ALL);
                out.extend_from_slice(&0u64.to_le_bytes());
            }
            StalenessFilter::MaxAge(s) => {
                out.push(FILTER_MAX_AGE);
                out.extend_from_slice(&s.to_le_bytes());
            }
            StalenessFilter::ExactVersion(v) => {
                out.push(FILTER_EXACT_VERSION);
                out.extend_from_slice(&v.to_le_bytes());
            }
        },
        Message::Weights(entries) => {
            out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
            for e in entries {
                out.extend_from_slice(&(e.index as u32).to_le_bytes());
                out.extend_from_slice(&e.weight.to_le_bytes());
                out.extend_from_slice(&e.timestamp.to_le_bytes());
                out.extend_from_slice(&e.param_version.to_le_bytes());
            }
        }
        Message::PutWorkerStatus(s) => {
            out.extend_from_slice(&s.worker_id.to_le_bytes());
            out.extend_from_slice(&s.scored_version.to_le_bytes());
        }
        Message::WorkerStatuses(list) => {
            out.extend_from_slice(&(list.len() as u32).to_le_bytes());
            for s in list {
                out.extend_from_slice(&s.worker_id.to_le_bytes());
                out.extend_from_slice(&s.scored_version.to_le_bytes());
            }
        }
        Message::Error { code, text } => {
            out.extend_from_slice(&code.to_le_bytes());
            out.extend_from_slice(text.as_bytes());
        }
    }
    out
}

pub fn encode(msg: &Message) -> Vec<u8> {
    let body = payload(msg);
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.push(MAGIC);
    out.push(msg.kind());
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

/// Reads fixed-width little-endian fields, tracking the absolute byte offset.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.buf.len() - self.pos < n {
            return Err(ProtocolError::at(self.base + self.buf.len(), ProtocolErrorKind::Truncated));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ProtocolError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ProtocolError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ProtocolError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ProtocolError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ProtocolError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn offset(&self) -> usize {
        self.base + self.pos
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn finish(&self) -> Result<(), ProtocolError> {
        if self.remaining() != 0 {
            return Err(ProtocolError::at(
                self.offset(),
                ProtocolErrorKind::LengthMismatch { declared: self.pos, actual: self.buf.len() },
            ));
        }
        Ok(())
    }

    /// Guards a `count × record` list against lengths the payload cannot hold.
    fn check_count(&self, count: usize, record: usize) -> Result<(), ProtocolError> {
        if count.saturating_mul(record) > self.remaining() {
            return Err(ProtocolError::at(self.base + self.buf.len(), ProtocolErrorKind::Truncated));
        }
        Ok(())
    }
}

fn get_snapshot(c: &mut Cursor<'_>) -> Result<ParamsSnapshot, ProtocolError> {
    let version = c.u64()?;
    let n_layers = c.u16()? as usize;
    c.check_count(n_layers, 8)?;
    let mut shapes = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        shapes.push((c.u32()?, c.u32()?));
    }
    let expected = ParamsSnapshot::expected_len(&shapes);
    let rem = c.remaining();
    if rem != expected.saturating_mul(4) {
        return Err(ProtocolError::at(
            c.offset(),
            ProtocolErrorKind::Invalid(format!("shapes need {expected} floats, payload holds {rem} bytes")),
        ));
    }
    let params = c
        .take(rem)?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(ParamsSnapshot { version, shapes, params })
}

fn decode_payload(kind_byte: u8, c: &mut Cursor<'_>) -> Result<Message, ProtocolError> {
    let msg = match kind_byte {
        kind::PUT_PARAMS => Message::PutParams(get_snapshot(c)?),
        kind::PARAMS => Message::Params(get_snapshot(c)?),
        kind::GET_PARAMS => Message::GetParams,
        kind::GET_WORKER_STATUS => Message::GetWorkerStatus,
        kind::OK => Message::Ok,
        kind::PUT_WEIGHTS => {
            let param_version = c.u64()?;
            let count = c.u32()? as usize;
            c.check_count(count, 12)?;
            let mut entries = Vec::with_capacity(count);
            for _ in 0..count {
                entries.push((c.u32()?, c.f64()?));
            }
            Message::PutWeights { param_version, entries }
        }
        kind::GET_WEIGHTS => {
            let at = c.offset();
            let filter = match c.u8()? {
                FILTER_ALL => {
                    c.u64()?;
                    StalenessFilter::All
                }
                FILTER_MAX_AGE => StalenessFilter::MaxAge(c.f64()?),
                FILTER_EXACT_VERSION => StalenessFilter::ExactVersion(c.u64()?),
                other => {
                    return Err(ProtocolError::at(at, ProtocolErrorKind::Invalid(format!("filter kind {other}"))))
                }
            };
            Message::GetWeights(filter)
        }
        kind::WEIGHTS => {
            let count = c.u32()? as usize;
            c.check_count(count, 28)?;
            let mut entries = Vec::with_capacity(count);
            for _ in 0..count {
                let index = c.u32()? as usize;
                let weight = c.f64()?;
                let timestamp = c.f64()?;
                let param_version = c.u64()?;
                entries.push(WeightEntry { index, weight, param_version, timestamp });
            }
            Message::Weights(entries)
        }
        kind::PUT_WORKER_STATUS => {
            Message::PutWorkerStatus(WorkerStatus { worker_id: c.u32()?, scored_version: c.u64()? })
        }
        kind::WORKER_STATUS => {
            let count = c.u32()? as usize;
            c.check_count(count, 12)?;
            let mut list = Vec::with_capacity(count);
            for _ in 0..count {
                list.push(WorkerStatus { worker_id: c.u32()?, scored_version: c.u64()? });
            }
            Message::WorkerStatuses(list)
        }
        kind::ERROR => {
            let code = c.u32()?;
            let at = c.offset();
            let text = std::str::from_utf8(c.take(c.remaining())?)
                .map_err(|e| ProtocolError::at(at + e.valid_up_to(), ProtocolErrorKind::Invalid("error text is not utf-8".into())))?
                .to_owned();
            Message::Error { code, text }
        }
        other => return Err(ProtocolError::at(1, ProtocolErrorKind::UnknownKind(other))),
    };
    c.finish()?;
    Ok(msg)
}

fn check_header(bytes: &[u8]) -> Result<(u8, usize), ProtocolError> {
    if bytes.len() < HEADER_LEN {
        return Err(ProtocolError::at(bytes.len(), ProtocolErrorKind::Truncated));
    }
    if bytes[0] != MAGIC {
        return Err(ProtocolError::at(0, ProtocolErrorKind::BadMagic(bytes[0])));
    }
    let len = u32::from_le_bytes(bytes[2..6].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(ProtocolError::at(2, ProtocolErrorKind::Invalid(format!("payload of {len} bytes exceeds limit"))));
    }
    Ok((bytes[1], len))
}

/// Decodes exactly one complete frame.
pub fn decode(bytes: &[u8]) -> Result<Message, ProtocolError> {
    let (kind_byte, len) = check_header(bytes)?;
    let actual = bytes.len() - HEADER_LEN;
    if actual < len {
        return Err(ProtocolError::at(bytes.len(), ProtocolErrorKind::Truncated));
    }
    if actual > len {
        return Err(ProtocolError::at(
            HEADER_LEN + len,
            ProtocolErrorKind::LengthMismatch { declared: len, actual },
        ));
    }
    let mut c = Cursor { buf: &bytes[HEADER_LEN..], pos: 0, base: HEADER_LEN };
    decode_payload(kind_byte, &mut c)
}

/// Error raised while reading a frame from a stream.
#[derive(Debug, thiserror::Error)]
pub enum ReadError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// Reads one frame. Returns `Ok(None)` on a clean end of stream before any header byte.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<Message>, ReadError> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(ProtocolError::at(got, ProtocolErrorKind::Truncated).into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let (_, len) = check_header(&header)?;
    let mut frame = vec![0u8; HEADER_LEN + len];
    frame[..HEADER_LEN].copy_from_slice(&header);
    r.read_exact(&mut frame[HEADER_LEN..]).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            ReadError::Protocol(ProtocolError::at(HEADER_LEN, ProtocolErrorKind::Truncated))
        } else {
            ReadError::Io(e)
        }
    })?;
    Ok(Some(decode(&frame)?))
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> io::Result<()> {
    w.write_all(&encode(msg))?;
    w.flush()
}
