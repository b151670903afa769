//! SHA-256 digests that bind protocol objects to the key or sum they belong to.

use core::fmt;

use sha2::{Digest, Sha256};

use crate::ring::RingElement;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Fingerprint(pub [u8; 32]);

impl Fingerprint {
    pub const ZERO: Fingerprint = Fingerprint([0; 32]);

    pub fn of_element(domain: &[u8], el: &RingElement) -> Self {
        let mut h = Sha256::new();
        h.update(domain);
        h.update(el.to_bytes());
        Self(h.finalize().into())
    }

    pub fn of_bytes(domain: &[u8], bytes: &[u8]) -> Self {
        let mut h = Sha256::new();
        h.update(domain);
        h.update(bytes);
        Self(h.finalize().into())
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint(")?;
        for b in &self.0[..6] {
            write!(f, "{b:02x}")?;
        }
        write!(f, "..)")
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}
