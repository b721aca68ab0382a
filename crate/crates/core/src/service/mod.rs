//! Client-facing server and client for the length-prefixed JSON protocol
//! described in `docs/protocol.md`.

mod client;
mod config;
pub mod protocol;
mod server;

pub use client::{Client, ClientError};
pub use config::{ConfigError, ServerConfig, DEFAULT_LISTEN};
pub use protocol::{ClientFrame, ServerFrame};
pub use server::{start, start_with, BackendChoice, ServerHandle, CLIENT_TERMINATE_REASON};
