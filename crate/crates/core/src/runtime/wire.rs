//! Bit-exact framing for tensors exchanged between head and tail.
//!
//! ```text
//! "ISWF" | u16 version | u8 msg_type | u64 request_id | u8 dtype | u8 rank
//!        | rank x u32 dims | payload | u32 crc32
//! ```
//!
//! Little-endian throughout; the CRC (IEEE) covers every preceding byte. A
//! rank-0 frame carries no payload. On a stream each frame is preceded by its
//! length as a u32.

use std::fmt;
use std::io::{self, Read, Write};

use thiserror::Error;

use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"ISWF";
pub const VERSION: u16 = 1;
/// Bytes before the dims: magic, version, type, id, dtype, rank.
pub const FIXED_HEADER: usize = 17;
pub const CRC_BYTES: usize = 4;
/// Upper bound on a single frame accepted from a stream.
pub const MAX_FRAME_BYTES: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MsgType {
    InferRequest = 0,
    InferResponse = 1,
    Error = 2,
    Ping = 3,
}

impl MsgType {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(MsgType::InferRequest),
            1 => Some(MsgType::InferResponse),
            2 => Some(MsgType::Error),
            3 => Some(MsgType::Ping),
            _ => None,
        }
    }
}

/// Reason codes carried by error frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorCode {
    Truncated = 1,
    BadMagic = 2,
    BadVersion = 3,
    Crc = 4,
    UnknownMsgType = 5,
    UnknownDtype = 6,
    LengthMismatch = 7,
    ShapeMismatch = 8,
    Internal = 9,
    UnexpectedMsgType = 10,
    Busy = 11,
    FrameTooLarge = 12,
}

impl ErrorCode {
    pub fn from_code(code: u32) -> Option<Self> {
        use ErrorCode::*;
        [
            Truncated,
            BadMagic,
            BadVersion,
            Crc,
            UnknownMsgType,
            UnknownDtype,
            LengthMismatch,
            ShapeMismatch,
            Internal,
            UnexpectedMsgType,
            Busy,
            FrameTooLarge,
        ]
        .into_iter()
        .find(|c| *c as u32 == code)
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ErrorCode::Truncated => "truncated frame",
            ErrorCode::BadMagic => "bad magic",
            ErrorCode::BadVersion => "unsupported version",
            ErrorCode::Crc => "crc mismatch",
            ErrorCode::UnknownMsgType => "unknown message type",
            ErrorCode::UnknownDtype => "unknown dtype",
            ErrorCode::LengthMismatch => "payload length mismatch",
            ErrorCode::ShapeMismatch => "tensor shape mismatch",
            ErrorCode::Internal => "internal server error",
            ErrorCode::UnexpectedMsgType => "unexpected message type",
            ErrorCode::Busy => "server at connection limit",
            ErrorCode::FrameTooLarge => "frame too large",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("frame truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("bad frame magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported frame version {0}")]
    BadVersion(u16),
    #[error("frame crc mismatch: stored {stored:08x}, computed {actual:08x}")]
    Crc { stored: u32, actual: u32 },
    #[error("unknown message type {0}")]
    UnknownMsgType(u8),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("frame length {actual} does not match the {expected} bytes its header implies")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(usize),
}

impl WireError {
    pub fn code(&self) -> ErrorCode {
        match self {
            WireError::Truncated { .. } => ErrorCode::Truncated,
            WireError::BadMagic(_) => ErrorCode::BadMagic,
            WireError::BadVersion(_) => ErrorCode::BadVersion,
            WireError::Crc { .. } => ErrorCode::Crc,
            WireError::UnknownMsgType(_) => ErrorCode::UnknownMsgType,
            WireError::UnknownDtype(_) => ErrorCode::UnknownDtype,
            WireError::LengthMismatch { .. } => ErrorCode::LengthMismatch,
            WireError::TooLarge(_) => ErrorCode::FrameTooLarge,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireFrame {
    pub msg_type: MsgType,
    pub request_id: u64,
    pub dtype: DType,
    pub dims: Vec<u32>,
    /// Raw little-endian scalars, `product(dims) * dtype.size()` bytes
    /// (empty when `dims` is empty).
    pub payload: Vec<u8>,
}

fn payload_len(dims: &[u32], dtype: DType) -> usize {
    if dims.is_empty() {
        0
    } else {
        dims.iter().map(|&d| d as usize).product::<usize>() * dtype.size()
    }
}

impl WireFrame {
    pub fn ping(request_id: u64) -> Self {
        Self {
            msg_type: MsgType::Ping,
            request_id,
            dtype: DType::F32,
            dims: Vec::new(),
            payload: Vec::new(),
        }
    }

    pub fn with_tensor<T: Scalar>(msg_type: MsgType, request_id: u64, tensor: &Tensor<T>) -> Self {
        let mut payload = Vec::with_capacity(tensor.numel() * T::DTYPE.size());
        for &v in tensor.data() {
            v.write_le(&mut payload);
        }
        let mut dims: Vec<u32> = tensor.shape().iter().map(|&d| d as u32).collect();
        if dims.is_empty() {
            // a scalar travels as a length-1 vector; rank 0 means "no payload"
            dims.push(1);
        }
        Self {
            msg_type,
            request_id,
            dtype: T::DTYPE,
            dims,
            payload,
        }
    }

    pub fn error(request_id: u64, code: ErrorCode) -> Self {
        Self::with_tensor(MsgType::Error, request_id, &Tensor::<f32>::full(&[1], code as u32 as f32))
    }

    /// Reason code of an error frame.
    pub fn error_code(&self) -> Option<ErrorCode> {
        if self.msg_type != MsgType::Error {
            return None;
        }
        let t = self.tensor::<f32>()?;
        ErrorCode::from_code(t.item()? as u32)
    }

    /// Payload as a tensor when the dtype matches `T`.
    pub fn tensor<T: Scalar>(&self) -> Option<Tensor<T>> {
        if self.dtype != T::DTYPE || self.dims.is_empty() {
            return None;
        }
        let shape: Vec<usize> = self.dims.iter().map(|&d| d as usize).collect();
        let data = self.payload.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
        Tensor::new(shape, data).ok()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    pub fn encoded_len(&self) -> usize {
        FIXED_HEADER + 4 * self.dims.len() + self.payload.len() + CRC_BYTES
    }

    /// Panics if the payload length disagrees with the dims; frames built
    /// through the constructors always agree.
    pub fn encode(&self) -> Vec<u8> {
        assert_eq!(self.payload.len(), payload_len(&self.dims, self.dtype), "payload does not match dims");
        assert!(self.dims.len() <= u8::MAX as usize, "rank above 255");
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.msg_type as u8);
        out.extend_from_slice(&self.request_id.to_le_bytes());
        out.push(self.dtype.code());
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&self.payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let need = |needed: usize| {
            if bytes.len() < needed {
                Err(WireError::Truncated {
                    needed,
                    have: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        need(4)?;
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(WireError::BadMagic(magic));
        }
        need(6)?;
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(WireError::BadVersion(version));
        }
        need(FIXED_HEADER)?;
        let rank = bytes[16] as usize;
        let header = FIXED_HEADER + 4 * rank;
        need(header)?;
        let dims: Vec<u32> = bytes[FIXED_HEADER..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let dtype = DType::from_code(bytes[15]).ok_or(WireError::UnknownDtype(bytes[15]))?;
        let expected = header
            .checked_add(
                dims.iter()
                    .try_fold(if dims.is_empty() { 0usize } else { dtype.size() }, |acc, &d| acc.checked_mul(d as usize))
                    .ok_or(WireError::TooLarge(usize::MAX))?,
            )
            .and_then(|v| v.checked_add(CRC_BYTES))
            .ok_or(WireError::TooLarge(usize::MAX))?;
        need(expected)?;
        if bytes.len() != expected {
            return Err(WireError::LengthMismatch {
                expected,
                actual: bytes.len(),
            });
        }
        let body = expected - CRC_BYTES;
        let stored = u32::from_le_bytes(bytes[body..].try_into().expect("4 bytes"));
        let actual = crc32fast::hash(&bytes[..body]);
        if stored != actual {
            return Err(WireError::Crc { stored, actual });
        }
        let msg_type = MsgType::from_code(bytes[6]).ok_or(WireError::UnknownMsgType(bytes[6]))?;
        let request_id = u64::from_le_bytes(bytes[7..15].try_into().expect("8 bytes"));
        Ok(Self {
            msg_type,
            request_id,
            dtype,
            dims,
            payload: bytes[header..body].to_vec(),
        })
    }
}

/// Request id from a possibly corrupt frame, for addressing error replies.
pub fn peek_request_id(bytes: &[u8]) -> u64 {
    bytes
        .get(7..15)
        .map_or(0, |b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
}

/// Writes `bytes` with a u32 length prefix.
pub fn write_message(w: &mut impl Write, bytes: &[u8]) -> io::Result<()> {
    let len = u32::try_from(bytes.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame above 4 GiB"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(bytes)?;
    w.flush()
}

#[derive(Debug)]
pub enum ReadOutcome {
    Message(Vec<u8>),
    /// Peer closed the stream cleanly between messages.
    Closed,
    /// Declared length above [`MAX_FRAME_BYTES`]; the stream is no longer in sync.
    TooLarge(usize),
}

/// Reads one length-prefixed message.
pub fn read_message(r: &mut impl Read) -> io::Result<ReadOutcome> {
    let mut len = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match r.read(&mut len[filled..])? {
            0 if filled == 0 => return Ok(ReadOutcome::Closed),
            0 => return Err(io::ErrorKind::UnexpectedEof.into()),
            n => filled += n,
        }
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME_BYTES {
        return Ok(ReadOutcome::TooLarge(len));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(ReadOutcome::Message(buf))
}
