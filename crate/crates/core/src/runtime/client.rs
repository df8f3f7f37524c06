//! Head-side client: runs the head locally and ships the split tensor.

use std::io;
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::wire::{read_message, write_message, ErrorCode, MsgType, ReadOutcome, WireError, WireFrame};
use crate::model::{Model, ModelError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("connection to {addr} refused")]
    Refused { addr: String, source: io::Error },
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("server replied with error: {}", .code.map_or_else(|| "unknown reason".to_string(), |c| c.to_string()))]
    Server { code: Option<ErrorCode> },
    #[error("malformed reply: {0}")]
    Protocol(#[from] WireError),
    #[error("reply does not match request: {0}")]
    UnexpectedReply(String),
    #[error("connection closed by server")]
    Closed,
    #[error("i/o error: {0}")]
    Io(io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl ClientError {
    fn from_io(e: io::Error, timeout: Duration) -> Self {
        match e.kind() {
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => ClientError::Timeout(timeout),
            io::ErrorKind::UnexpectedEof | io::ErrorKind::ConnectionReset | io::ErrorKind::BrokenPipe => {
                ClientError::Closed
            }
            _ => ClientError::Io(e),
        }
    }
}

/// Wall-clock breakdown of one remote inference, in milliseconds.
///
/// `transfer_ms` is the faster of two round trips with the same payload:
/// a ping the server echoes and the inference request itself. `tail_ms` is
/// the remainder of the inference round trip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub head_ms: f64,
    pub transfer_ms: f64,
    pub tail_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub logits: Tensor<f32>,
    pub timing: Timing,
    /// Bytes of the request frame on the wire, length prefix excluded.
    pub request_bytes: usize,
}

impl Inference {
    pub fn class(&self) -> usize {
        self.logits.argmax()
    }
}

pub struct TailClient {
    stream: TcpStream,
    peer: SocketAddr,
    timeout: Duration,
    next_id: u64,
}

impl TailClient {
    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Self, ClientError> {
        let mut last = None;
        let addrs: Vec<SocketAddr> = addr.to_socket_addrs().map_err(ClientError::Io)?.collect();
        for a in &addrs {
            match TcpStream::connect_timeout(a, timeout) {
                Ok(stream) => {
                    stream.set_read_timeout(Some(timeout)).map_err(ClientError::Io)?;
                    stream.set_write_timeout(Some(timeout)).map_err(ClientError::Io)?;
                    stream.set_nodelay(true).map_err(ClientError::Io)?;
                    return Ok(Self {
                        stream,
                        peer: *a,
                        timeout,
                        next_id: 1,
                    });
                }
                Err(e) => last = Some((a, e)),
            }
        }
        match last {
            Some((_, e)) if matches!(e.kind(), io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock) => {
                Err(ClientError::Timeout(timeout))
            }
            Some((a, e)) => Err(ClientError::Refused {
                addr: a.to_string(),
                source: e,
            }),
            None => Err(ClientError::Io(io::Error::new(io::ErrorKind::InvalidInput, "address resolved to nothing"))),
        }
    }

    pub fn peer(&self) -> SocketAddr {
        self.peer
    }

    fn exchange(&mut self, frame: &WireFrame) -> Result<(WireFrame, Duration), ClientError> {
        let bytes = frame.encode();
        let start = Instant::now();
        write_message(&mut self.stream, &bytes).map_err(|e| ClientError::from_io(e, self.timeout))?;
        let reply = match read_message(&mut self.stream).map_err(|e| ClientError::from_io(e, self.timeout))? {
            ReadOutcome::Message(b) => b,
            ReadOutcome::Closed => return Err(ClientError::Closed),
            ReadOutcome::TooLarge(n) => return Err(ClientError::Protocol(WireError::TooLarge(n))),
        };
        let elapsed = start.elapsed();
        let reply = WireFrame::decode(&reply)?;
        if reply.msg_type == MsgType::Error {
            return Err(ClientError::Server {
                code: reply.error_code(),
            });
        }
        if reply.request_id != frame.request_id {
            return Err(ClientError::UnexpectedReply(format!(
                "request id {} answered as {}",
                frame.request_id, reply.request_id
            )));
        }
        Ok((reply, elapsed))
    }

    fn take_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    /// Round trip of a ping carrying `payload`; the echo must match exactly.
    pub fn ping(&mut self, payload: &Tensor<f32>) -> Result<Duration, ClientError> {
        let frame = WireFrame::with_tensor(MsgType::Ping, self.take_id(), payload);
        let (reply, rtt) = self.exchange(&frame)?;
        if reply != frame {
            return Err(ClientError::UnexpectedReply("ping echo differs".into()));
        }
        Ok(rtt)
    }

    /// Sends the split tensor and returns the tail logits with the round trip.
    pub fn request(&mut self, split: &Tensor<f32>) -> Result<(Tensor<f32>, Duration, usize), ClientError> {
        let frame = WireFrame::with_tensor(MsgType::InferRequest, self.take_id(), split);
        let len = frame.encoded_len();
        let (reply, rtt) = self.exchange(&frame)?;
        if reply.msg_type != MsgType::InferResponse {
            return Err(ClientError::UnexpectedReply(format!("{:?} in reply to a request", reply.msg_type)));
        }
        let logits = reply
            .tensor::<f32>()
            .ok_or_else(|| ClientError::UnexpectedReply("response payload is not f32".into()))?;
        Ok((logits, rtt, len))
    }

    /// Runs `head` on `image`, then the tail remotely.
    pub fn infer(&mut self, head: &Model<f32>, image: &Tensor<f32>) -> Result<Inference, ClientError> {
        let start = Instant::now();
        let split = head.forward(image)?;
        let head_time = start.elapsed();
        let ping = self.ping(&split)?;
        let (logits, rtt, request_bytes) = self.request(&split)?;
        let total = start.elapsed();
        let transfer = ping.min(rtt);
        let ms = |d: Duration| d.as_secs_f64() * 1e3;
        Ok(Inference {
            logits,
            timing: Timing {
                head_ms: ms(head_time),
                transfer_ms: ms(transfer),
                tail_ms: ms(rtt - transfer),
                total_ms: ms(total),
            },
            request_bytes,
        })
    }
}

/// One-shot remote inference over a fresh connection.
pub fn head_infer(
    head: &Model<f32>,
    image: &Tensor<f32>,
    addr: impl ToSocketAddrs,
    timeout: Duration,
) -> Result<Inference, ClientError> {
    TailClient::connect(addr, timeout)?.infer(head, image)
}
