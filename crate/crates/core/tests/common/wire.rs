//! Framing helpers for talking to a tail server by hand.

use std::net::{SocketAddr, TcpStream};
use std::time::Duration;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use isplit::runtime::wire::{read_message, write_message, ReadOutcome};
use isplit::runtime::{MsgType, WireFrame};
use isplit::tensor::Tensor;

pub const TIMEOUT: Duration = Duration::from_secs(5);

pub fn exchange(stream: &mut TcpStream, bytes: &[u8]) -> Vec<u8> {
    write_message(stream, bytes).unwrap();
    match read_message(stream).unwrap() {
        ReadOutcome::Message(b) => b,
        other => panic!("expected a reply, got {other:?}"),
    }
}

pub fn connect(addr: SocketAddr) -> TcpStream {
    let s = TcpStream::connect(addr).unwrap();
    s.set_read_timeout(Some(TIMEOUT)).unwrap();
    s
}

/// Random shapes and bit patterns, NaN and infinities included.
pub fn random_frame(rng: &mut ChaCha8Rng, id: u64) -> WireFrame {
    let rank = rng.random_range(1..4);
    let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..7)).collect();
    let special = [f32::NAN, f32::INFINITY, f32::NEG_INFINITY, -0.0, f32::MIN_POSITIVE / 2.0, f32::MAX];
    let t = Tensor::from_fn(&shape, |_| {
        if rng.random_bool(0.2) {
            special[rng.random_range(0..special.len())]
        } else {
            f32::from_bits(rng.random())
        }
    });
    WireFrame::with_tensor(MsgType::Ping, id, &t)
}

pub fn corrupt(rng: &mut ChaCha8Rng, mut bytes: Vec<u8>) -> Vec<u8> {
    match rng.random_range(0..3) {
        0 => {
            let i = rng.random_range(0..bytes.len());
            bytes[i] ^= 1 << rng.random_range(0..8);
        }
        1 => bytes.truncate(rng.random_range(0..bytes.len())),
        _ => {
            let n = rng.random_range(1..4);
            bytes.extend((0..n).map(|_| rng.random::<u8>()));
        }
    }
    bytes
}
