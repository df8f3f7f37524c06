//! Tail-side TCP server: one thread per connection, length-prefixed frames.

use std::io::{self, Read};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, info, warn};

use super::wire::{peek_request_id, read_message, write_message, ErrorCode, MsgType, ReadOutcome, WireFrame};
use crate::model::Model;

const LINGER: Duration = Duration::from_millis(500);
const LINGER_BYTES: u64 = 1 << 20;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub max_connections: usize,
    /// Idle time after which a connection is dropped.
    pub read_timeout: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            max_connections: 16,
            read_timeout: Duration::from_secs(30),
        }
    }
}

/// Running server. Dropping the handle does not stop it; call [`ServerHandle::shutdown`].
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
    served: Arc<AtomicUsize>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Requests answered so far (pings included).
    pub fn served(&self) -> usize {
        self.served.load(Ordering::SeqCst)
    }

    /// Stops accepting and waits for the accept loop to exit. Open connections
    /// end at their next read timeout or when the peer closes.
    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    /// Blocks until the accept loop exits.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    fn stop_and_join(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the blocking accept
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

struct Shared {
    tail: Model<f32>,
    active: AtomicUsize,
    served: Arc<AtomicUsize>,
    config: ServerConfig,
}

/// Binds `addr` and serves `tail` on a background thread.
pub fn serve_tail(addr: impl ToSocketAddrs, tail: Model<f32>, config: ServerConfig) -> io::Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let served = Arc::new(AtomicUsize::new(0));
    let shared = Arc::new(Shared {
        tail,
        active: AtomicUsize::new(0),
        served: served.clone(),
        config,
    });
    info!("serving tail ({} layers) on {local}", shared.tail.len());
    let stop_flag = stop.clone();
    let accept = thread::Builder::new()
        .name("isplit-accept".into())
        .spawn(move || accept_loop(listener, shared, stop_flag))?;
    Ok(ServerHandle {
        addr: local,
        stop,
        accept: Some(accept),
        served,
    })
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>, stop: Arc<AtomicBool>) {
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                warn!("accept failed: {e}");
                continue;
            }
        };
        let active = shared.active.fetch_add(1, Ordering::SeqCst);
        if active >= shared.config.max_connections {
            shared.active.fetch_sub(1, Ordering::SeqCst);
            debug!("rejecting connection: {active} active");
            reject(stream);
            continue;
        }
        let spawned = thread::Builder::new().name("isplit-conn".into()).spawn({
            let shared = shared.clone();
            move || {
                if let Err(e) = handle_connection(stream, &shared) {
                    debug!("connection ended: {e}");
                }
                shared.active.fetch_sub(1, Ordering::SeqCst);
            }
        });
        if let Err(e) = spawned {
            warn!("could not spawn connection thread: {e}");
            shared.active.fetch_sub(1, Ordering::SeqCst);
        }
    }
}

fn reject(mut stream: TcpStream) {
    let spawned = thread::Builder::new().name("isplit-reject".into()).spawn(move || {
        let _ = write_message(&mut stream, &WireFrame::error(0, ErrorCode::Busy).encode());
        close_after_reply(&stream);
    });
    if let Err(e) = spawned {
        warn!("could not spawn rejection thread: {e}");
    }
}

/// Half-closes, then drains what the peer already sent, so the close does not
/// reset the connection before the last reply is read.
fn close_after_reply(stream: &TcpStream) {
    let _ = stream.shutdown(Shutdown::Write);
    let _ = stream.set_read_timeout(Some(LINGER));
    let _ = io::copy(&mut Read::take(stream, LINGER_BYTES), &mut io::sink());
}

fn handle_connection(mut stream: TcpStream, shared: &Shared) -> io::Result<()> {
    stream.set_read_timeout(Some(shared.config.read_timeout))?;
    stream.set_nodelay(true)?;
    loop {
        let bytes = match read_message(&mut stream)? {
            ReadOutcome::Message(b) => b,
            ReadOutcome::Closed => return Ok(()),
            ReadOutcome::TooLarge(len) => {
                warn!("dropping connection after {len}-byte frame header");
                write_message(&mut stream, &WireFrame::error(0, ErrorCode::FrameTooLarge).encode())?;
                close_after_reply(&stream);
                return Ok(());
            }
        };
        let reply = respond(&bytes, &shared.tail);
        write_message(&mut stream, &reply.encode())?;
        shared.served.fetch_add(1, Ordering::SeqCst);
    }
}

/// Reply to one raw frame. Malformed input yields an error frame.
pub fn respond(bytes: &[u8], tail: &Model<f32>) -> WireFrame {
    let frame = match WireFrame::decode(bytes) {
        Ok(f) => f,
        Err(e) => {
            debug!("malformed frame: {e}");
            return WireFrame::error(peek_request_id(bytes), e.code());
        }
    };
    let id = frame.request_id;
    match frame.msg_type {
        MsgType::Ping => WireFrame {
            msg_type: MsgType::Ping,
            ..frame
        },
        MsgType::InferRequest => {
            let Some(x) = frame.tensor::<f32>() else {
                return WireFrame::error(id, ErrorCode::ShapeMismatch);
            };
            if x.shape() != tail.input_shape() {
                return WireFrame::error(id, ErrorCode::ShapeMismatch);
            }
            match tail.forward(&x) {
                Ok(y) => WireFrame::with_tensor(MsgType::InferResponse, id, &y),
                Err(e) => {
                    warn!("tail forward failed: {e}");
                    WireFrame::error(id, ErrorCode::Internal)
                }
            }
        }
        MsgType::InferResponse | MsgType::Error => WireFrame::error(id, ErrorCode::UnexpectedMsgType),
    }
}
