//! Serverless networking: NAT traversal for function sandboxes.

pub mod bench;
pub mod coordination;
pub mod execution;
pub mod fabric;
pub mod ipc;
pub mod networking;
pub mod overlay;
pub mod proto;
pub mod seed;
pub mod socket;
pub mod transport;
