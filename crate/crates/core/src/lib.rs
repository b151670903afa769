//! Additive multi-key CKKS over `Z_q[X]/(X^n+1)` with an aggregated public
//! key (xMK-CKKS), the per-device-key MK-CKKS baseline it improves on, and
//! the federated-averaging pieces needed to run both inside a training loop.
//!
//! The crate is `no_std` and only needs `alloc`. Everything that touches a
//! socket, a file or a clock lives in the `xmk-node` companion crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod encoder;
pub mod error;
pub mod fedavg;
pub mod federation;
pub mod fingerprint;
pub mod mkhe;
pub mod modarith;
pub mod ntt;
pub mod ring;
pub mod sampling;
pub mod seeds;
pub mod wire;

pub use encoder::{EncodingParams, PlainVector};
pub use error::{Error, Result};
pub use fedavg::{LocalDataset, ModelLayout, ModelWeights, Optimizer, TrainingConfig};
pub use fingerprint::Fingerprint;
pub use mkhe::{
    AggregatedPublicKey, Ciphertext, CiphertextSum, DecryptionShare, MkCiphertextSum, Preset,
    PublicKeyShare, SecretKey, SumBroadcast,
};
pub use ring::{Domain, Ring, RingElement, RingParams};
