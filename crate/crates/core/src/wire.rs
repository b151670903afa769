//! Byte encoding of keys, ciphertexts and shares.
//!
//! Every object starts with a 38-byte header
//! `type tag: u8 | version: u8 | device id or count: u32 LE | fingerprint: [u8; 32]`
//! followed by its ring elements in the ring wire format. An aggregated key
//! additionally lists its contributor ids as `u32 LE` after the element.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fingerprint::Fingerprint;
use crate::mkhe::{
    AggregatedPublicKey, Ciphertext, CiphertextSum, DecryptionShare, MkCiphertextSum,
    PublicKeyShare, SecretKey, SumBroadcast,
};
use crate::ring::RingElement;

pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 38;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum TypeTag {
    SecretKey = 1,
    PublicKeyShare = 2,
    AggregatedPublicKey = 3,
    Ciphertext = 4,
    CiphertextSum = 5,
    DecryptionShare = 6,
    MkCiphertextSum = 7,
    SumBroadcast = 8,
}

struct Header {
    id_or_count: u32,
    fingerprint: Fingerprint,
}

fn write_header(out: &mut Vec<u8>, tag: TypeTag, id_or_count: u32, fp: &Fingerprint) {
    out.push(tag as u8);
    out.push(VERSION);
    out.extend_from_slice(&id_or_count.to_le_bytes());
    out.extend_from_slice(fp.as_bytes());
}

fn read_header(bytes: &[u8], tag: TypeTag) -> Result<Header> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Malformed("truncated object header"));
    }
    if bytes[0] != tag as u8 {
        return Err(Error::Malformed("unexpected object type tag"));
    }
    if bytes[1] != VERSION {
        return Err(Error::Malformed("unsupported object version"));
    }
    Ok(Header {
        id_or_count: u32::from_le_bytes(bytes[2..6].try_into().unwrap()),
        fingerprint: Fingerprint(bytes[6..38].try_into().unwrap()),
    })
}

/// Reads ring elements back to back starting at `*pos`.
fn read_element(bytes: &[u8], pos: &mut usize) -> Result<RingElement> {
    let (el, used) = RingElement::read_bytes(&bytes[*pos..])?;
    *pos += used;
    Ok(el)
}

fn finish<T>(value: T, bytes: &[u8], pos: usize) -> Result<(T, usize)> {
    debug_assert!(pos <= bytes.len());
    Ok((value, pos))
}

pub trait WireObject: Sized {
    fn write_to(&self, out: &mut Vec<u8>);

    /// Parses one object from the front of `bytes`, returning the bytes consumed.
    fn read_from(bytes: &[u8]) -> Result<(Self, usize)>;

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out);
        out
    }

    fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (v, used) = Self::read_from(bytes)?;
        if used != bytes.len() {
            return Err(Error::Malformed("trailing bytes after object"));
        }
        Ok(v)
    }
}

impl WireObject for SecretKey {
    fn write_to(&self, out: &mut Vec<u8>) {
        write_header(out, TypeTag::SecretKey, self.device_id, &Fingerprint::ZERO);
        self.s.write_bytes(out);
    }

    fn read_from(bytes: &[u8]) -> Result<(Self, usize)> {
        let h = read_header(bytes, TypeTag::SecretKey)?;
        let mut pos = HEADER_LEN;
        let s = read_element(bytes, &mut pos)?;
        finish(
            SecretKey {
                s,
                device_id: h.id_or_count,
            },
            bytes,
            pos,
        )
    }
}

impl WireObject for PublicKeyShare {
    fn write_to(&self, out: &mut Vec<u8>) {
        write_header(
            out,
            TypeTag::PublicKeyShare,
            self.device_id,
            &self.fingerprint(),
        );
        self.b.write_bytes(out);
    }

    fn read_from(bytes: &[u8]) -> Result<(Self, usize)> {
        let h = read_header(bytes, TypeTag::PublicKeyShare)?;
        let mut pos = HEADER_LEN;
        let b = read_element(bytes, &mut pos)?;
        let pk = PublicKeyShare {
            b,
            device_id: h.id_or_count,
        };
        if pk.fingerprint() != h.fingerprint {
            return Err(Error::FingerprintMismatch("public key share digest"));
        }
        finish(pk, bytes, pos)
    }
}

impl WireObject for AggregatedPublicKey {
    fn write_to(&self, out: &mut Vec<u8>) {
        write_header(
            out,
            TypeTag::AggregatedPublicKey,
            self.contributors.len() as u32,
            &self.fingerprint(),
        );
        self.b_tilde.write_bytes(out);
        for id in &self.contributors {
            out.extend_from_slice(&id.to_le_bytes());
        }
    }

    fn read_from(bytes: &[u8]) -> Result<(Self, usize)> {
        let h = read_header(bytes, TypeTag::AggregatedPublicKey)?;
        let mut pos = HEADER_LEN;
        let b_tilde = read_element(bytes, &mut pos)?;
        let count = h.id_or_count as usize;
        let end = pos
            .checked_add(
                count
                    .checked_mul(4)
                    .ok_or(Error::Malformed("contributor count"))?,
            )
            .ok_or(Error::Malformed("contributor count"))?;
        if bytes.len() < end {
            return Err(Error::Malformed("truncated contributor list"));
        }
        let contributors: Vec<u32> = bytes[pos..end]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if contributors.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Malformed("contributors must be strictly ascending"));
        }
        let apk = AggregatedPublicKey {
            b_tilde,
            contributors,
        };
        if apk.fingerprint() != h.fingerprint {
            return Err(Error::FingerprintMismatch("aggregated key digest"));
        }
        finish(apk, bytes, end)
    }
}

impl WireObject for Ciphertext {
    fn write_to(&self, out: &mut Vec<u8>) {
        write_header(out, TypeTag::Ciphertext, 0, &self.key_fingerprint);
        self.c0.write_bytes(out);
        self.c1.write_bytes(out);
    }

    fn read_from(bytes: &[u8]) -> Result<(Self, usize)> {
        let h = read_header(bytes, TypeTag::Ciphertext)?;
        let mut pos = HEADER_LEN;
        let c0 = read_element(bytes, &mut pos)?;
        let c1 = read_element(bytes, &mut pos)?;
        finish(
            Ciphertext {
                c0,
                c1,
                key_fingerprint: h.fingerprint,
            },
            bytes,
            pos,
        )
    }
}

impl WireObject for CiphertextSum {
    fn write_to(&self, out: &mut Vec<u8>) {
        write_header(
            out,
            TypeTag::CiphertextSum,
            self.count,
            &self.key_fingerprint,
        );
        self.c_sum0.write_bytes(out);
        self.c_sum1.write_bytes(out);
    }

    fn read_from(bytes: &[u8]) -> Result<(Self, usize)> {
        let h = read_header(bytes, TypeTag::CiphertextSum)?;
        let mut pos = HEADER_LEN;
        let c_sum0 = read_element(bytes, &mut pos)?;
        let c_sum1 = read_element(bytes, &mut pos)?;
        finish(
            CiphertextSum {
                c_sum0,
                c_sum1,
                count: h.id_or_count,
                key_fingerprint: h.fingerprint,
            },
            bytes,
            pos,
        )
    }
}

impl WireObject for SumBroadcast {
    fn write_to(&self, out: &mut Vec<u8>) {
        write_header(
            out,
            TypeTag::SumBroadcast,
            self.count,
            &self.key_fingerprint,
        );
        self.c_sum1.write_bytes(out);
    }

    fn read_from(bytes: &[u8]) -> Result<(Self, usize)> {
        let h = read_header(bytes, TypeTag::SumBroadcast)?;
        let mut pos = HEADER_LEN;
        let c_sum1 = read_element(bytes, &mut pos)?;
        finish(
            SumBroadcast {
                c_sum1,
                count: h.id_or_count,
                key_fingerprint: h.fingerprint,
            },
            bytes,
            pos,
        )
    }
}

impl WireObject for DecryptionShare {
    fn write_to(&self, out: &mut Vec<u8>) {
        write_header(
            out,
            TypeTag::DecryptionShare,
            self.device_id,
            &self.sum_fingerprint,
        );
        self.d.write_bytes(out);
    }

    fn read_from(bytes: &[u8]) -> Result<(Self, usize)> {
        let h = read_header(bytes, TypeTag::DecryptionShare)?;
        let mut pos = HEADER_LEN;
        let d = read_element(bytes, &mut pos)?;
        finish(
            DecryptionShare {
                d,
                device_id: h.id_or_count,
                sum_fingerprint: h.fingerprint,
            },
            bytes,
            pos,
        )
    }
}

impl WireObject for MkCiphertextSum {
    fn write_to(&self, out: &mut Vec<u8>) {
        write_header(
            out,
            TypeTag::MkCiphertextSum,
            self.c1_list.len() as u32,
            &Fingerprint::ZERO,
        );
        self.c0_sum.write_bytes(out);
        for c1 in &self.c1_list {
            c1.write_bytes(out);
        }
    }

    fn read_from(bytes: &[u8]) -> Result<(Self, usize)> {
        let h = read_header(bytes, TypeTag::MkCiphertextSum)?;
        let mut pos = HEADER_LEN;
        let c0_sum = read_element(bytes, &mut pos)?;
        let mut c1_list = Vec::new();
        for _ in 0..h.id_or_count {
            c1_list.push(read_element(bytes, &mut pos)?);
        }
        finish(MkCiphertextSum { c0_sum, c1_list }, bytes, pos)
    }
}

/// Serialized size of an object carrying `elements` ring elements of dimension `n`.
pub fn object_len(n: usize, elements: usize) -> usize {
    HEADER_LEN + elements * RingElement::serialized_len(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mkhe::{self, Preset};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn objects_roundtrip_and_have_predicted_sizes() {
        let (ring, _, crs) = mkhe::setup(Preset::Toy).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let (sk1, pk1) = mkhe::keygen(&ring, &crs, &mut rng, 4).unwrap();
        let (_, pk2) = mkhe::keygen(&ring, &crs, &mut rng, 9).unwrap();
        let apk = mkhe::aggregate_public_keys(&ring, &[pk1.clone(), pk2.clone()]).unwrap();
        let ct = mkhe::encrypt(&ring, &ring.one(), &apk, &crs, &mut rng).unwrap();
        let cs = mkhe::add_ciphertexts(&ring, &[ct.clone(), ct.clone()]).unwrap();
        let share = mkhe::decryption_share(&ring, &sk1, &apk, &cs, &mut rng).unwrap();
        let mks = mkhe::mk_add(
            &ring,
            &[
                mkhe::mk_encrypt(&ring, &ring.one(), &pk1, &crs, &mut rng).unwrap(),
                mkhe::mk_encrypt(&ring, &ring.one(), &pk2, &crs, &mut rng).unwrap(),
            ],
        )
        .unwrap();

        let n = ring.n();
        assert_eq!(SecretKey::from_bytes(&sk1.to_bytes()).unwrap(), sk1);
        assert_eq!(pk1.to_bytes().len(), object_len(n, 1));
        assert_eq!(PublicKeyShare::from_bytes(&pk1.to_bytes()).unwrap(), pk1);
        assert_eq!(apk.to_bytes().len(), object_len(n, 1) + 8);
        assert_eq!(
            AggregatedPublicKey::from_bytes(&apk.to_bytes()).unwrap(),
            apk
        );
        assert_eq!(ct.to_bytes().len(), object_len(n, 2));
        assert_eq!(Ciphertext::from_bytes(&ct.to_bytes()).unwrap(), ct);
        assert_eq!(CiphertextSum::from_bytes(&cs.to_bytes()).unwrap(), cs);
        assert_eq!(share.to_bytes().len(), object_len(n, 1));
        let sb = cs.broadcast();
        assert_eq!(sb.to_bytes().len(), share.to_bytes().len());
        assert_eq!(SumBroadcast::from_bytes(&sb.to_bytes()).unwrap(), sb);
        assert_eq!(
            DecryptionShare::from_bytes(&share.to_bytes()).unwrap(),
            share
        );
        assert_eq!(mks.to_bytes().len(), object_len(n, 3));
        assert_eq!(MkCiphertextSum::from_bytes(&mks.to_bytes()).unwrap(), mks);
    }

    #[test]
    fn corrupt_objects_are_rejected() {
        let (ring, _, crs) = mkhe::setup(Preset::Toy).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let (_, pk) = mkhe::keygen(&ring, &crs, &mut rng, 1).unwrap();
        let bytes = pk.to_bytes();
        assert!(Ciphertext::from_bytes(&bytes).is_err());
        let mut tampered = bytes.clone();
        *tampered.last_mut().unwrap() ^= 1;
        assert!(PublicKeyShare::from_bytes(&tampered).is_err());
        let mut versioned = bytes.clone();
        versioned[1] = 2;
        assert!(PublicKeyShare::from_bytes(&versioned).is_err());
        assert!(PublicKeyShare::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
