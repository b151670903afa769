//! Fixed-point encoding of real vectors into ring plaintexts through the
//! canonical embedding.
//!
//! Slot `j` of a plaintext `m` is `m(zeta^(5^j)) / scale`, with `zeta` a
//! primitive 2n-th complex root of unity. Only the `n/2` slots indexed by
//! the powers of 5 are free; the other half are their conjugates, which
//! keeps the polynomial real. Model weights are real, so imaginary parts
//! are always zero on the way in and dropped on the way out.

use alloc::vec::Vec;
use core::ops::{Add, Mul, Sub};

use crate::error::{Error, Result};
use crate::modarith::from_signed;
use crate::ring::{Domain, Ring, RingElement};

pub const MIN_SCALE: f64 = (1u64 << 20) as f64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodingParams {
    pub scale: f64,
    pub slots: usize,
}

impl EncodingParams {
    pub fn new(scale: f64, ring: &Ring) -> Result<Self> {
        let ep = Self {
            scale,
            slots: ring.n() / 2,
        };
        ep.validate(ring)?;
        Ok(ep)
    }

    pub fn validate(&self, ring: &Ring) -> Result<()> {
        if !(self.scale >= MIN_SCALE) || !self.scale.is_finite() {
            return Err(Error::InvalidEncoding("scale must be at least 2^20"));
        }
        if libm::exp2(libm::round(libm::log2(self.scale))) != self.scale {
            return Err(Error::InvalidEncoding("scale must be a power of two"));
        }
        if self.slots != ring.n() / 2 {
            return Err(Error::InvalidEncoding("slots must equal n/2"));
        }
        Ok(())
    }
}

/// Up to `n/2` real values destined for one plaintext.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlainVector(pub Vec<f64>);

impl PlainVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub(crate) struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    pub fn new(re: f64, im: f64) -> Self {
        Self { re, im }
    }

    pub fn scale(self, k: f64) -> Self {
        Self::new(self.re * k, self.im * k)
    }
}

impl Add for Complex {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.re + o.re, self.im + o.im)
    }
}

impl Sub for Complex {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.re - o.re, self.im - o.im)
    }
}

impl Mul for Complex {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self::new(
            self.re * o.re - self.im * o.im,
            self.re * o.im + self.im * o.re,
        )
    }
}

/// Precomputed roots for the slot-permuted FFT over the orbit of 5.
#[derive(Debug, Clone)]
pub struct Encoder {
    ring: Ring,
    params: EncodingParams,
    rot_group: Vec<usize>,
    roots: Vec<Complex>,
}

impl Encoder {
    pub fn new(ring: &Ring, params: EncodingParams) -> Result<Self> {
        params.validate(ring)?;
        let m = 2 * ring.n();
        let slots = params.slots;
        let mut rot_group = Vec::with_capacity(slots);
        let mut g = 1usize;
        for _ in 0..slots {
            rot_group.push(g);
            g = g * 5 % m;
        }
        let roots = (0..=m)
            .map(|k| {
                let angle = core::f64::consts::TAU * k as f64 / m as f64;
                Complex::new(libm::cos(angle), libm::sin(angle))
            })
            .collect();
        Ok(Self {
            ring: ring.clone(),
            params,
            rot_group,
            roots,
        })
    }

    pub fn params(&self) -> &EncodingParams {
        &self.params
    }

    pub fn ring(&self) -> &Ring {
        &self.ring
    }

    /// Coefficients (real and imaginary halves) to slot values.
    fn fft_special(&self, vals: &mut [Complex]) {
        let size = vals.len();
        let m = 2 * self.ring.n();
        bit_reverse_permute(vals);
        let mut len = 2;
        while len <= size {
            let lenh = len >> 1;
            let lenq = len << 2;
            for i in (0..size).step_by(len) {
                for j in 0..lenh {
                    let idx = (self.rot_group[j] % lenq) * m / lenq;
                    let u = vals[i + j];
                    let v = vals[i + j + lenh] * self.roots[idx];
                    vals[i + j] = u + v;
                    vals[i + j + lenh] = u - v;
                }
            }
            len <<= 1;
        }
    }

    /// Slot values to coefficients; inverse of [`Self::fft_special`].
    fn fft_special_inv(&self, vals: &mut [Complex]) {
        let size = vals.len();
        let m = 2 * self.ring.n();
        let mut len = size;
        while len >= 2 {
            let lenh = len >> 1;
            let lenq = len << 2;
            for i in (0..size).step_by(len) {
                for j in 0..lenh {
                    let idx = (lenq - self.rot_group[j] % lenq) * m / lenq;
                    let u = vals[i + j] + vals[i + j + lenh];
                    let v = (vals[i + j] - vals[i + j + lenh]) * self.roots[idx];
                    vals[i + j] = u;
                    vals[i + j + lenh] = v;
                }
            }
            len >>= 1;
        }
        bit_reverse_permute(vals);
        let inv = 1.0 / size as f64;
        vals.iter_mut().for_each(|v| *v = v.scale(inv));
    }

    pub fn encode(&self, v: &PlainVector) -> Result<RingElement> {
        let slots = self.params.slots;
        let scale = self.params.scale;
        if v.len() > slots {
            return Err(Error::VectorTooLong {
                len: v.len(),
                slots,
            });
        }
        let limit = self.ring.q() as f64 / 4.0;
        let mut vals = alloc::vec![Complex::default(); slots];
        for (i, (&x, slot)) in v.0.iter().zip(vals.iter_mut()).enumerate() {
            if !x.is_finite() {
                return Err(Error::NonFinite(i));
            }
            if libm::fabs(x) * scale >= limit {
                return Err(Error::EncodingOverflow { slot: i, value: x });
            }
            *slot = Complex::new(x, 0.0);
        }
        self.fft_special_inv(&mut vals);
        let q = self.ring.q();
        let mut coeffs = alloc::vec![0u64; self.ring.n()];
        for (i, z) in vals.iter().enumerate() {
            coeffs[i] = from_signed(libm::round(z.re * scale) as i64, q);
            coeffs[i + slots] = from_signed(libm::round(z.im * scale) as i64, q);
        }
        self.ring.from_coeffs(coeffs)
    }

    pub fn decode(&self, p: &RingElement) -> Result<PlainVector> {
        self.ring.check(p)?;
        if p.domain() != Domain::Coefficient {
            return Err(Error::NotCoefficientDomain);
        }
        let slots = self.params.slots;
        let inv_scale = 1.0 / self.params.scale;
        let signed = p.signed_coeffs();
        let mut vals: Vec<Complex> = (0..slots)
            .map(|i| {
                Complex::new(
                    signed[i] as f64 * inv_scale,
                    signed[i + slots] as f64 * inv_scale,
                )
            })
            .collect();
        self.fft_special(&mut vals);
        Ok(PlainVector(vals.into_iter().map(|z| z.re).collect()))
    }
}

fn bit_reverse_permute<T>(vals: &mut [T]) {
    let n = vals.len();
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            vals.swap(i, j);
        }
    }
}

pub fn encode(v: &PlainVector, ep: &EncodingParams, ring: &Ring) -> Result<RingElement> {
    Encoder::new(ring, *ep)?.encode(v)
}

pub fn decode(p: &RingElement, ep: &EncodingParams, ring: &Ring) -> Result<PlainVector> {
    Encoder::new(ring, *ep)?.decode(p)
}

/// Splits a flat weight vector into slot-sized chunks, zero-padding the last.
pub fn chunk_weights(weights: &[f64], slots: usize) -> Vec<PlainVector> {
    assert!(slots > 0, "slot count must be positive");
    weights
        .chunks(slots)
        .map(|c| {
            let mut v = c.to_vec();
            v.resize(slots, 0.0);
            PlainVector(v)
        })
        .collect()
}

pub fn chunk_count(len: usize, slots: usize) -> usize {
    len.div_ceil(slots)
}

/// Concatenates chunks and drops the padding past `original_len`.
pub fn unchunk(chunks: &[PlainVector], original_len: usize) -> Result<Vec<f64>> {
    let capacity: usize = chunks.iter().map(PlainVector::len).sum();
    let slots = chunks.first().map(PlainVector::len).unwrap_or(0);
    let expected_chunks = if slots == 0 {
        0
    } else {
        chunk_count(original_len, slots)
    };
    if capacity < original_len || chunks.len() != expected_chunks {
        return Err(Error::LengthMismatch {
            expected: original_len,
            actual: capacity,
        });
    }
    let mut out: Vec<f64> = chunks.iter().flat_map(|c| c.0.iter().copied()).collect();
    out.truncate(original_len);
    Ok(out)
}
