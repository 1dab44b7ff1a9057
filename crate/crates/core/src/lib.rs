//! Obfuscation networks for remote inference.
//!
//! An obfuscation network runs on the edge device and maps each input to a
//! same-shaped tensor that a fixed, already deployed inference network still
//! classifies correctly. The modules cover the network zoo, data loading,
//! training against a frozen inference network, model files, the TCP
//! protocol between edge and backend, obfuscation metrics and timing.

pub mod bench;
pub mod data;
pub mod metrics;
pub mod model_io;
pub mod obfset;
pub mod protocol;
pub mod train;
pub mod zoo;
