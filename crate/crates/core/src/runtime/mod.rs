//! Split inference across a network boundary.

pub mod channel;
pub mod client;
pub mod server;
pub mod wire;

pub use channel::{estimate_transfer, sweep_report, ChannelError, ChannelModel, SweepEntry, SweepRow};
pub use client::{head_infer, ClientError, Inference, TailClient, Timing};
pub use server::{serve_tail, ServerConfig, ServerHandle};
pub use wire::{ErrorCode, MsgType, WireError, WireFrame};
