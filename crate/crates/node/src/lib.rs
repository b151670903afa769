//! Networked aggregation server and devices, benchmarks and the `xmk` CLI
//! on top of `xmk-core`.

pub mod bench;
pub mod config;
pub mod device;
pub mod framing;
pub mod message;
pub mod server;
pub mod sim;
pub mod snapshot;
pub mod transport;
