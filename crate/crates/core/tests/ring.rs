use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use xmk_core::mkhe::{self, Preset};
use xmk_core::sampling::{
    crs, sample_gaussian, sample_gaussian_signed, sample_ternary, sample_uniform, CRS_LABEL,
};
use xmk_core::{Domain, Ring, RingElement, RingParams};

fn ring(n: usize, q: u64) -> Ring {
    Ring::new(RingParams {
        n,
        q,
        sigma_err: 3.2,
        sigma_flood: 3.2 * 1024.0,
        seed: [3; 32],
    })
    .unwrap()
}

fn random(r: &Ring, rng: &mut ChaCha20Rng) -> RingElement {
    let q = r.q();
    r.from_coeffs((0..r.n()).map(|_| rng.gen_range(0..q)).collect())
        .unwrap()
}

/// Negacyclic convolution in 128-bit integers, reduced once per coefficient.
fn schoolbook(x: &[u64], y: &[u64], q: u64) -> Vec<u64> {
    let n = x.len();
    let q = q as u128;
    let mut pos = vec![0u128; n];
    let mut neg = vec![0u128; n];
    for i in 0..n {
        for j in 0..n {
            let p = x[i] as u128 * y[j] as u128 % q;
            if i + j < n {
                pos[i + j] = (pos[i + j] + p) % q;
            } else {
                neg[i + j - n] = (neg[i + j - n] + p) % q;
            }
        }
    }
    pos.iter()
        .zip(&neg)
        .map(|(&p, &m)| ((p + q - m) % q) as u64)
        .collect()
}

fn check_against_schoolbook(r: &Ring, pairs: usize, seed: u64) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for _ in 0..pairs {
        let x = random(r, &mut rng);
        let y = random(r, &mut rng);
        let z = r.mul(&x, &y).unwrap();
        assert_eq!(z.coeffs(), &schoolbook(x.coeffs(), y.coeffs(), r.q())[..]);
        let zn = r
            .mul(&r.to_ntt(&x).unwrap(), &r.to_ntt(&y).unwrap())
            .unwrap();
        assert_eq!(r.to_coeff(&zn).unwrap(), z);
    }
}

#[test]
fn ntt_mul_matches_schoolbook_small() {
    check_against_schoolbook(&ring(8, 3329), 200, 1);
    check_against_schoolbook(&ring(16, 7681), 200, 2);
}

#[test]
fn ntt_mul_matches_schoolbook_n2048() {
    let (r, _, _) = mkhe::setup(Preset::Small).unwrap();
    assert_eq!(r.n(), 2048);
    check_against_schoolbook(&r, 20, 3);
}

#[test]
fn add_matches_wide_integer_oracle() {
    let r = ring(8, 3329);
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    for _ in 0..200 {
        let x = random(&r, &mut rng);
        let y = random(&r, &mut rng);
        let want: Vec<u64> = x
            .coeffs()
            .iter()
            .zip(y.coeffs())
            .map(|(&a, &b)| ((a as u128 + b as u128) % 3329) as u64)
            .collect();
        assert_eq!(r.add(&x, &y).unwrap().coeffs(), &want[..]);
    }
}

#[test]
fn ntt_roundtrip_on_1000_elements() {
    let (r, _, _) = mkhe::setup(Preset::Small).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let x = random(&r, &mut rng);
        let f = r.to_ntt(&x).unwrap();
        assert_eq!(f.domain(), Domain::Ntt);
        assert_eq!(r.to_coeff(&f).unwrap(), x);
        // and starting from the NTT side
        let as_ntt = r.to_ntt(&r.to_coeff(&f).unwrap()).unwrap();
        assert_eq!(as_ntt, f);
    }
}

fn element(q: u64) -> impl Strategy<Value = Vec<u64>> {
    prop::collection::vec(0..q, 8)
}

proptest! {
    #[test]
    fn ring_axioms(a in element(3329), b in element(3329), c in element(3329)) {
        let r = ring(8, 3329);
        let a = r.from_coeffs(a).unwrap();
        let b = r.from_coeffs(b).unwrap();
        let c = r.from_coeffs(c).unwrap();
        let add = |x: &RingElement, y: &RingElement| r.add(x, y).unwrap();
        let mul = |x: &RingElement, y: &RingElement| r.mul(x, y).unwrap();
        prop_assert_eq!(add(&a, &b), add(&b, &a));
        prop_assert_eq!(add(&add(&a, &b), &c), add(&a, &add(&b, &c)));
        prop_assert_eq!(mul(&a, &b), mul(&b, &a));
        prop_assert_eq!(mul(&mul(&a, &b), &c), mul(&a, &mul(&b, &c)));
        prop_assert_eq!(mul(&a, &add(&b, &c)), add(&mul(&a, &b), &mul(&a, &c)));
        prop_assert!(add(&a, &r.negate(&a).unwrap()).is_zero());
        prop_assert!(r.sub(&a, &a).unwrap().is_zero());
        prop_assert_eq!(mul(&a, &r.one()), a.clone());
    }

    #[test]
    fn serialization_roundtrip(a in element(3329), ntt in any::<bool>()) {
        let r = ring(8, 3329);
        let mut x = r.from_coeffs(a).unwrap();
        if ntt {
            x = r.to_ntt(&x).unwrap();
        }
        let bytes = x.to_bytes();
        prop_assert_eq!(bytes.len(), RingElement::serialized_len(8));
        prop_assert_eq!(RingElement::from_bytes(&bytes).unwrap(), x);
    }
}

#[test]
fn crs_is_deterministic_and_label_separated() {
    let r = ring(16, 7681);
    let seed = [9u8; 32];
    assert_eq!(
        sample_uniform(&r, &seed, CRS_LABEL),
        sample_uniform(&r, &seed, CRS_LABEL)
    );
    assert_ne!(
        sample_uniform(&r, &seed, CRS_LABEL),
        sample_uniform(&r, &seed, b"other")
    );
    assert_eq!(crs(&r), crs(&r));
}

#[test]
fn uniform_passes_chi_squared() {
    // 10^5 coefficients in 64 bins; 63 degrees of freedom, critical value
    // at significance 0.01 is 92.01. Bin widths differ by one residue.
    let r = ring(128, 3329);
    let bins = 64usize;
    let q = 3329u64;
    let mut counts = vec![0u64; bins];
    let mut total = 0u64;
    let mut label = 0u32;
    while total < 100_000 {
        let x = sample_uniform(&r, &[2; 32], &label.to_le_bytes());
        for &c in x.coeffs() {
            if total == 100_000 {
                break;
            }
            counts[(c as usize * bins) / q as usize] += 1;
            total += 1;
        }
        label += 1;
    }
    let chi2: f64 = (0..bins)
        .map(|b| {
            let lo = (b as u64 * q).div_ceil(bins as u64);
            let hi = ((b + 1) as u64 * q).div_ceil(bins as u64);
            let expected = total as f64 * (hi - lo) as f64 / q as f64;
            let d = counts[b] as f64 - expected;
            d * d / expected
        })
        .sum();
    assert!(chi2 < 92.01, "chi-squared {chi2}");
}

#[test]
fn ternary_support_and_mean() {
    let r = ring(1024, 12289);
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let trials = 10;
    let mut sum = 0i64;
    for _ in 0..trials {
        let s = sample_ternary(&r, &mut rng);
        assert!(s.inf_norm() <= 1);
        assert!(s.signed_coeffs().iter().all(|c| (-1..=1).contains(c)));
        sum += s.signed_coeffs().iter().sum::<i64>();
    }
    let count = (r.n() * trials) as f64;
    let sigma = (2.0f64 / 3.0).sqrt();
    let mean = sum as f64 / count;
    assert!(mean.abs() <= 3.0 * sigma / count.sqrt(), "mean {mean}");
}

#[test]
fn ternary_support_over_10k_samples() {
    let r = ring(8, 3329);
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    for _ in 0..10_000 {
        assert!(sample_ternary(&r, &mut rng).inf_norm() <= 1);
    }
}

fn std_dev(xs: &[i64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<i64>() as f64 / n;
    (xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
}

#[test]
fn gaussian_moments_and_tail_cut() {
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let xs = sample_gaussian_signed(100_000, 3.2, &mut rng).unwrap();
    let sd = std_dev(&xs);
    assert!((sd - 3.2).abs() < 0.05 * 3.2, "std {sd}");
    assert!(xs.iter().all(|x| x.abs() <= 32));

    let flood = sample_gaussian_signed(100_000, 3.2 * 1024.0, &mut rng).unwrap();
    assert!(std_dev(&flood) > sd);
    assert!(flood
        .iter()
        .all(|x| (x.abs() as f64) <= 10.0 * 3.2 * 1024.0));

    let r = ring(1024, 12289);
    let e = sample_gaussian(&r, 3.2, &mut rng).unwrap();
    assert!(e.inf_norm() <= 32);
    assert!(sample_gaussian(&r, 0.0, &mut rng).is_err());
    assert!(sample_gaussian(&r, -1.0, &mut rng).is_err());
}
