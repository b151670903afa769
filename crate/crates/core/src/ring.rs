//! Arithmetic in `R_q = Z_q[X]/(X^n+1)`.

use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::modarith::{add_mod, mul_mod, neg_mod, sub_mod, to_signed};
use crate::ntt::NttTable;

/// Parameters of the ring and of the three sampling distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct RingParams {
    pub n: usize,
    pub q: u64,
    pub sigma_err: f64,
    pub sigma_flood: f64,
    /// Seed of the common reference string.
    pub seed: [u8; 32],
}

impl RingParams {
    pub fn validate(&self) -> Result<()> {
        if !self.n.is_power_of_two() || self.n < 8 {
            return Err(Error::InvalidParams(
                "n must be a power of two and at least 8",
            ));
        }
        if self.q >= 1 << 62 {
            return Err(Error::InvalidParams("q must be below 2^62"));
        }
        if !crate::modarith::is_prime(self.q) {
            return Err(Error::InvalidParams("q must be prime"));
        }
        if self.q % (2 * self.n as u64) != 1 {
            return Err(Error::InvalidParams("q must be 1 mod 2n"));
        }
        if !(self.sigma_err > 0.0) || !self.sigma_err.is_finite() {
            return Err(Error::InvalidSigma(self.sigma_err));
        }
        if !(self.sigma_flood > self.sigma_err) || !self.sigma_flood.is_finite() {
            return Err(Error::InvalidParams(
                "flooding deviation must exceed the error deviation",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Coefficient,
    Ntt,
}

impl Domain {
    pub(crate) fn tag(self) -> u8 {
        match self {
            Domain::Coefficient => 0,
            Domain::Ntt => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Domain::Coefficient),
            1 => Some(Domain::Ntt),
            _ => None,
        }
    }
}

/// A vector of `n` residues in `[0, q)` tagged with its representation.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RingElement {
    coeffs: Vec<u64>,
    q: u64,
    domain: Domain,
}

pub const RING_HEADER_LEN: usize = 16;

impl RingElement {
    pub fn coeffs(&self) -> &[u64] {
        &self.coeffs
    }

    pub fn n(&self) -> usize {
        self.coeffs.len()
    }

    pub fn modulus(&self) -> u64 {
        self.q
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    /// Coefficients lifted to `(-q/2, q/2]`.
    pub fn signed_coeffs(&self) -> Vec<i64> {
        self.coeffs.iter().map(|&c| to_signed(c, self.q)).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|&c| c == 0)
    }

    /// Infinity norm of the centered lift. Meaningful in the coefficient domain.
    pub fn inf_norm(&self) -> u64 {
        self.coeffs
            .iter()
            .map(|&c| to_signed(c, self.q).unsigned_abs())
            .max()
            .unwrap_or(0)
    }

    pub fn serialized_len(n: usize) -> usize {
        RING_HEADER_LEN + 8 * n
    }

    /// `n: u32 | q: u64 | domain: u8 | 3 reserved bytes | n x u64`, all little-endian.
    pub fn write_bytes(&self, out: &mut Vec<u8>) {
        out.reserve(Self::serialized_len(self.n()));
        out.extend_from_slice(&(self.n() as u32).to_le_bytes());
        out.extend_from_slice(&self.q.to_le_bytes());
        out.push(self.domain.tag());
        out.extend_from_slice(&[0u8; 3]);
        for c in &self.coeffs {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_bytes(&mut out);
        out
    }

    /// Parses one element from the front of `bytes`, returning it and the bytes consumed.
    pub fn read_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < RING_HEADER_LEN {
            return Err(Error::Malformed("truncated ring element header"));
        }
        let n = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let q = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
        let domain = Domain::from_tag(bytes[12]).ok_or(Error::Malformed("unknown domain tag"))?;
        if bytes[13..16] != [0, 0, 0] {
            return Err(Error::Malformed("reserved bytes must be zero"));
        }
        if q < 2 || n == 0 || !n.is_power_of_two() {
            return Err(Error::Malformed("bad ring element header"));
        }
        let total = Self::serialized_len(n);
        if bytes.len() < total {
            return Err(Error::Malformed("truncated ring element body"));
        }
        let coeffs: Vec<u64> = bytes[RING_HEADER_LEN..total]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if coeffs.iter().any(|&c| c >= q) {
            return Err(Error::Malformed("coefficient out of range"));
        }
        Ok((Self { coeffs, q, domain }, total))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (el, used) = Self::read_bytes(bytes)?;
        if used != bytes.len() {
            return Err(Error::Malformed("trailing bytes after ring element"));
        }
        Ok(el)
    }
}

#[derive(Debug)]
struct RingInner {
    params: RingParams,
    ntt: NttTable,
}

/// Validated ring parameters together with precomputed NTT tables.
///
/// Cheap to clone; all arithmetic goes through a `Ring` so operands can be
/// checked against its modulus and dimension.
#[derive(Debug, Clone)]
pub struct Ring {
    inner: Arc<RingInner>,
}

impl PartialEq for Ring {
    fn eq(&self, other: &Self) -> bool {
        self.inner.params == other.inner.params
    }
}

impl Ring {
    pub fn new(params: RingParams) -> Result<Self> {
        params.validate()?;
        let ntt = NttTable::new(params.n, params.q)?;
        Ok(Self {
            inner: Arc::new(RingInner { params, ntt }),
        })
    }

    pub fn params(&self) -> &RingParams {
        &self.inner.params
    }

    pub fn n(&self) -> usize {
        self.inner.params.n
    }

    pub fn q(&self) -> u64 {
        self.inner.params.q
    }

    pub fn zero(&self) -> RingElement {
        RingElement {
            coeffs: alloc::vec![0; self.n()],
            q: self.q(),
            domain: Domain::Coefficient,
        }
    }

    pub fn one(&self) -> RingElement {
        self.monomial(0)
    }

    /// `X^k` for `k < n`.
    pub fn monomial(&self, k: usize) -> RingElement {
        let mut e = self.zero();
        e.coeffs[k] = 1;
        e
    }

    pub fn from_coeffs(&self, coeffs: Vec<u64>) -> Result<RingElement> {
        if coeffs.len() != self.n() {
            return Err(Error::LengthMismatch {
                expected: self.n(),
                actual: coeffs.len(),
            });
        }
        if coeffs.iter().any(|&c| c >= self.q()) {
            return Err(Error::InvalidParams("coefficient not reduced mod q"));
        }
        Ok(RingElement {
            coeffs,
            q: self.q(),
            domain: Domain::Coefficient,
        })
    }

    pub fn from_signed(&self, coeffs: &[i64]) -> Result<RingElement> {
        let q = self.q();
        self.from_coeffs(
            coeffs
                .iter()
                .map(|&c| crate::modarith::from_signed(c, q))
                .collect(),
        )
    }

    pub(crate) fn from_raw(&self, coeffs: Vec<u64>, domain: Domain) -> RingElement {
        debug_assert_eq!(coeffs.len(), self.n());
        RingElement {
            coeffs,
            q: self.q(),
            domain,
        }
    }

    pub fn check(&self, x: &RingElement) -> Result<()> {
        if x.q != self.q() || x.n() != self.n() {
            return Err(Error::ParamMismatch {
                left_n: self.n(),
                left_q: self.q(),
                right_n: x.n(),
                right_q: x.q,
            });
        }
        Ok(())
    }

    fn check_pair(&self, x: &RingElement, y: &RingElement) -> Result<()> {
        self.check(x)?;
        self.check(y)?;
        if x.domain != y.domain {
            return Err(Error::DomainMismatch);
        }
        Ok(())
    }

    pub fn add(&self, x: &RingElement, y: &RingElement) -> Result<RingElement> {
        let mut out = x.clone();
        self.add_assign(&mut out, y)?;
        Ok(out)
    }

    pub fn add_assign(&self, x: &mut RingElement, y: &RingElement) -> Result<()> {
        self.check_pair(x, y)?;
        let q = self.q();
        x.coeffs
            .iter_mut()
            .zip(&y.coeffs)
            .for_each(|(a, &b)| *a = add_mod(*a, b, q));
        Ok(())
    }

    pub fn sub(&self, x: &RingElement, y: &RingElement) -> Result<RingElement> {
        self.check_pair(x, y)?;
        let q = self.q();
        let coeffs = x
            .coeffs
            .iter()
            .zip(&y.coeffs)
            .map(|(&a, &b)| sub_mod(a, b, q))
            .collect();
        Ok(self.from_raw(coeffs, x.domain))
    }

    pub fn negate(&self, x: &RingElement) -> Result<RingElement> {
        self.check(x)?;
        let q = self.q();
        let coeffs = x.coeffs.iter().map(|&a| neg_mod(a, q)).collect();
        Ok(self.from_raw(coeffs, x.domain))
    }

    /// Sum of a non-empty sequence of elements in the same domain.
    pub fn sum<'a, I>(&self, items: I) -> Result<RingElement>
    where
        I: IntoIterator<Item = &'a RingElement>,
    {
        let mut it = items.into_iter();
        let first = it.next().ok_or(Error::Empty("sum of no ring elements"))?;
        self.check(first)?;
        let mut acc = first.clone();
        for x in it {
            self.add_assign(&mut acc, x)?;
        }
        Ok(acc)
    }

    pub fn to_ntt(&self, x: &RingElement) -> Result<RingElement> {
        self.check(x)?;
        let mut out = x.clone();
        if out.domain == Domain::Coefficient {
            self.inner.ntt.forward(&mut out.coeffs);
            out.domain = Domain::Ntt;
        }
        Ok(out)
    }

    pub fn to_coeff(&self, x: &RingElement) -> Result<RingElement> {
        self.check(x)?;
        let mut out = x.clone();
        if out.domain == Domain::Ntt {
            self.inner.ntt.inverse(&mut out.coeffs);
            out.domain = Domain::Coefficient;
        }
        Ok(out)
    }

    /// Negacyclic product. Coefficient-domain inputs go through the NTT and
    /// come back in the coefficient domain; NTT-domain inputs are multiplied
    /// pointwise and stay there.
    pub fn mul(&self, x: &RingElement, y: &RingElement) -> Result<RingElement> {
        self.check_pair(x, y)?;
        let q = self.q();
        match x.domain {
            Domain::Ntt => {
                let coeffs = x
                    .coeffs
                    .iter()
                    .zip(&y.coeffs)
                    .map(|(&a, &b)| mul_mod(a, b, q))
                    .collect();
                Ok(self.from_raw(coeffs, Domain::Ntt))
            }
            Domain::Coefficient => {
                let xn = self.to_ntt(x)?;
                let yn = self.to_ntt(y)?;
                let prod = self.mul(&xn, &yn)?;
                self.to_coeff(&prod)
            }
        }
    }

    /// Multiplies every coefficient by an integer constant.
    pub fn scalar_mul(&self, x: &RingElement, k: u64) -> Result<RingElement> {
        self.check(x)?;
        let q = self.q();
        let k = k % q;
        let coeffs = x.coeffs.iter().map(|&a| mul_mod(a, k, q)).collect();
        Ok(self.from_raw(coeffs, x.domain))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_ring(n: usize, q: u64) -> Ring {
        Ring::new(RingParams {
            n,
            q,
            sigma_err: 3.2,
            sigma_flood: 100.0,
            seed: [7; 32],
        })
        .unwrap()
    }

    #[test]
    fn add_wraps_around_modulus() {
        let r = toy_ring(8, 17);
        let x = r.from_coeffs((1..=8).collect()).unwrap();
        let y = r.from_coeffs([16, 0, 0, 0, 0, 0, 0, 0].to_vec()).unwrap();
        assert_eq!(r.add(&x, &y).unwrap().coeffs(), &[0, 2, 3, 4, 5, 6, 7, 8]);
    }

    #[test]
    fn negation_and_subtraction() {
        let r = toy_ring(8, 17);
        assert!(r.negate(&r.zero()).unwrap().is_zero());
        assert_eq!(r.negate(&r.one()).unwrap().coeffs()[0], 16);
        let x = r.from_coeffs((1..=8).collect()).unwrap();
        assert!(r.sub(&x, &x).unwrap().is_zero());
        assert!(r.add(&x, &r.negate(&x).unwrap()).unwrap().is_zero());
    }

    #[test]
    fn multiplying_by_x_rotates_negacyclically() {
        let r = toy_ring(8, 17);
        let x = r.from_coeffs((1..=8).collect()).unwrap();
        let shifted = r.mul(&x, &r.monomial(1)).unwrap();
        assert_eq!(shifted.coeffs(), &[17 - 8, 1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(r.mul(&x, &r.one()).unwrap(), x);
    }

    #[test]
    fn mismatched_params_are_rejected() {
        let a = toy_ring(8, 17);
        let b = toy_ring(8, 3329);
        let c = toy_ring(16, 97);
        assert!(matches!(
            a.add(&a.one(), &b.one()),
            Err(Error::ParamMismatch { .. })
        ));
        assert!(a.mul(&a.one(), &c.one()).is_err());
        let ntt_one = a.to_ntt(&a.one()).unwrap();
        assert_eq!(a.add(&a.one(), &ntt_one), Err(Error::DomainMismatch));
    }

    #[test]
    fn invalid_params() {
        let base = RingParams {
            n: 8,
            q: 3329,
            sigma_err: 3.2,
            sigma_flood: 10.0,
            seed: [0; 32],
        };
        assert!(Ring::new(base.clone()).is_ok());
        assert!(Ring::new(RingParams {
            n: 4,
            ..base.clone()
        })
        .is_err());
        assert!(Ring::new(RingParams {
            n: 12,
            ..base.clone()
        })
        .is_err());
        assert!(Ring::new(RingParams {
            q: 3331,
            ..base.clone()
        })
        .is_err());
        // prime but not 1 mod 16
        assert!(Ring::new(RingParams {
            q: 3323,
            ..base.clone()
        })
        .is_err());
        assert!(Ring::new(RingParams {
            sigma_flood: 3.0,
            ..base.clone()
        })
        .is_err());
        assert!(Ring::new(RingParams {
            sigma_err: 0.0,
            ..base
        })
        .is_err());
    }

    #[test]
    fn serialization_layout() {
        let r = toy_ring(8, 17);
        let x = r.from_coeffs((1..=8).collect()).unwrap();
        let bytes = x.to_bytes();
        assert_eq!(bytes.len(), 16 + 64);
        assert_eq!(&bytes[0..4], &8u32.to_le_bytes());
        assert_eq!(&bytes[4..12], &17u64.to_le_bytes());
        assert_eq!(bytes[12], 0);
        assert_eq!(&bytes[16..24], &1u64.to_le_bytes());
        assert_eq!(RingElement::from_bytes(&bytes).unwrap(), x);
        assert!(RingElement::from_bytes(&bytes[..40]).is_err());
        let mut bad = bytes.clone();
        bad[16] = 17;
        assert!(RingElement::from_bytes(&bad).is_err());
    }
}
