//! Live teleoperation link: a framed message codec and a server that gives
//! each connected operator its own simulated rig, stepped at 50 Hz from the
//! freshest pose sample.

pub mod client;
pub mod codec;
pub mod queue;
pub mod server;

pub use client::{percentile, Client, LatencyStats};
pub use codec::{decode, encode, CodecError, WireMessage, PROTOCOL_VERSION};
pub use server::{serve, ServeConfig, ServerHandle, SessionStats, Transport};
