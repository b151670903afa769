//! The three ring distributions: uniform (CRS), ternary (keys and the
//! per-encryption `v`), and rounded Gaussians for both the standard error
//! and the wider flooding noise.

use alloc::vec::Vec;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::modarith::from_signed;
use crate::ring::{Ring, RingElement};

/// Gaussian samples beyond this many standard deviations are redrawn.
pub const TAIL_CUT: f64 = 10.0;

/// Label of the common reference string stream.
pub const CRS_LABEL: &[u8] = b"xmk/crs";

/// Deterministic generator keyed by `(seed, label)`.
pub fn labeled_rng(seed: &[u8; 32], label: &[u8]) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(seed);
    h.update((label.len() as u64).to_le_bytes());
    h.update(label);
    ChaCha20Rng::from_seed(h.finalize().into())
}

/// Uniform element of `R_q`, reproducible from `(seed, label)`.
pub fn sample_uniform(ring: &Ring, seed: &[u8; 32], label: &[u8]) -> RingElement {
    let mut rng = labeled_rng(seed, label);
    let q = ring.q();
    let mask = q.next_power_of_two() - 1;
    let coeffs = (0..ring.n())
        .map(|_| loop {
            let c = rng.next_u64() & mask;
            if c < q {
                break c;
            }
        })
        .collect();
    ring.from_coeffs(coeffs).expect("reduced by construction")
}

/// The common reference polynomial `a` for this ring's seed.
pub fn crs(ring: &Ring) -> RingElement {
    sample_uniform(ring, &ring.params().seed, CRS_LABEL)
}

/// Uniform ternary element, coefficients in `{-1, 0, 1}`.
pub fn sample_ternary<R: RngCore + ?Sized>(ring: &Ring, rng: &mut R) -> RingElement {
    let q = ring.q();
    let coeffs = (0..ring.n())
        .map(|_| match rng.gen_range(0u8..3) {
            0 => q - 1,
            1 => 0,
            _ => 1,
        })
        .collect();
    ring.from_coeffs(coeffs).expect("reduced by construction")
}

/// One standard normal draw (Box-Muller, one output per call).
pub fn standard_normal<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    // u1 in (0, 1] keeps ln finite
    let u1 = 1.0 - rng.gen::<f64>();
    let u2 = rng.gen::<f64>();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

/// Rounded centered Gaussian integer, redrawn outside `TAIL_CUT * sigma`.
pub fn rounded_gaussian<R: RngCore + ?Sized>(sigma: f64, rng: &mut R) -> i64 {
    let bound = TAIL_CUT * sigma;
    loop {
        let x = libm::round(sigma * standard_normal(rng));
        if libm::fabs(x) <= bound {
            return x as i64;
        }
    }
}

pub fn sample_gaussian_signed<R: RngCore + ?Sized>(
    n: usize,
    sigma: f64,
    rng: &mut R,
) -> Result<Vec<i64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidSigma(sigma));
    }
    Ok((0..n).map(|_| rounded_gaussian(sigma, rng)).collect())
}

pub fn sample_gaussian<R: RngCore + ?Sized>(
    ring: &Ring,
    sigma: f64,
    rng: &mut R,
) -> Result<RingElement> {
    let q = ring.q();
    let coeffs = sample_gaussian_signed(ring.n(), sigma, rng)?
        .into_iter()
        .map(|c| from_signed(c, q))
        .collect();
    ring.from_coeffs(coeffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ring::RingParams;

    fn ring(n: usize, q: u64) -> Ring {
        Ring::new(RingParams {
            n,
            q,
            sigma_err: 3.2,
            sigma_flood: 3.2 * 1024.0,
            seed: [1; 32],
        })
        .unwrap()
    }

    #[test]
    fn uniform_is_deterministic_per_label() {
        let r = ring(8, 3329);
        let a = sample_uniform(&r, &[9; 32], b"x");
        assert_eq!(a, sample_uniform(&r, &[9; 32], b"x"));
        assert_ne!(a, sample_uniform(&r, &[9; 32], b"y"));
        assert_ne!(a, sample_uniform(&r, &[8; 32], b"x"));
    }

    #[test]
    fn ternary_support() {
        let r = ring(64, 7681);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..200 {
            let s = sample_ternary(&r, &mut rng);
            assert!(s.inf_norm() <= 1);
        }
    }

    #[test]
    fn gaussian_rejects_bad_sigma() {
        let r = ring(8, 3329);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        assert_eq!(
            sample_gaussian(&r, 0.0, &mut rng),
            Err(Error::InvalidSigma(0.0))
        );
        assert!(sample_gaussian(&r, -1.0, &mut rng).is_err());
        assert!(sample_gaussian(&r, f64::NAN, &mut rng).is_err());
    }

    #[test]
    fn gaussian_respects_tail_cut() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let xs = sample_gaussian_signed(100_000, 0.7, &mut rng).unwrap();
        assert!(xs.iter().all(|&x| x.abs() <= 7));
    }
}
