//! Remote inference over TCP: a backend that runs the inference network and
//! an edge client that optionally obfuscates each sample before sending it.
//!
//! Example request frame for id 7 and a single sample of shape `[2]` holding
//! `[1.0, 0.5]`:
//!
//! ```text
//! 1a 00 00 00                 length 26
//! 4f 42 46 52 01              "OBFR", version 1
//! 07 00 00 00 00 00 00 00     id
//! 01 02 00 00 00              rank 1, dims [2]
//! 00 00 80 3f 00 00 00 3f     1.0, 0.5
//! ```
//!
//! and the response with label 0 over two classes:
//!
//! ```text
//! 19 00 00 00                 length 25
//! 4f 42 46 53 01              "OBFS", version 1
//! 07 00 00 00 00 00 00 00     id
//! 00 00 02 00                 label 0, 2 classes
//! 00 00 40 3f 00 00 80 3e     0.75, 0.25
//! ```

mod edge;
mod server;
mod wire;

use std::io;

use thiserror::Error;

pub use edge::{select_obfnet, EdgeClient, EdgeConfig, EdgeMode, EdgeResult, DEFAULT_TIMEOUT};
pub use server::{serve, ServerConfig, ServerHandle};
pub use wire::{
    peek_id, read_frame, write_frame, ErrorCode, ErrorFrame, Incoming, InferenceRequest, InferenceResponse, Reply,
    DEFAULT_MAX_FRAME, ERROR_MAGIC, REQUEST_MAGIC, RESPONSE_MAGIC, VERSION,
};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("timed out waiting for the server")]
    Timeout,
    #[error("malformed frame (request {id}): {reason}")]
    Malformed { id: u64, reason: String },
    #[error("unsupported protocol version {version} (request {id})")]
    UnsupportedVersion { id: u64, version: u8 },
    #[error("server error {code} for request {id}: {message}")]
    Server { id: u64, code: u16, message: String },
    #[error("response id {got} does not match request id {expected}")]
    IdMismatch { expected: u64, got: u64 },
    #[error("connection closed by peer")]
    Closed,
    #[error("opt-in mode needs at least one obfuscation network")]
    EmptySet,
    #[error("sample shape {got:?} does not match {expected:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },
    #[error(transparent)]
    Engine(#[from] obfnet_engine::EngineError),
}

impl ProtocolError {
    pub(crate) fn from_io(e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => ProtocolError::Timeout,
            io::ErrorKind::UnexpectedEof => ProtocolError::Closed,
            _ => ProtocolError::Io(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_hex_examples() {
        let req = InferenceRequest {
            id: 7,
            shape: vec![2],
            payload: vec![1.0, 0.5],
        };
        let hex: Vec<String> = req.encode().iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(
            hex.join(" "),
            "1a 00 00 00 4f 42 46 52 01 07 00 00 00 00 00 00 00 01 02 00 00 00 00 00 80 3f 00 00 00 3f"
        );
        let resp = InferenceResponse {
            id: 7,
            label: 0,
            probabilities: vec![0.75, 0.25],
        };
        let hex: Vec<String> = resp.encode().iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(
            hex.join(" "),
            "19 00 00 00 4f 42 46 53 01 07 00 00 00 00 00 00 00 00 00 02 00 00 00 40 3f 00 00 80 3e"
        );
    }
}
