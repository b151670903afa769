//! Additive multi-key CKKS.
//!
//! Two schemes share the key material:
//!
//! * **xMK-CKKS**: devices publish `b_i = -s_i*a + e_i`, everyone encrypts
//!   under `b~ = sum b_i`, the server adds ciphertexts into
//!   `(C_sum0, C_sum1)`, and each device returns one decryption share
//!   `D_i = s_i*C_sum1 + e*_i`. Only the sum is ever decryptable.
//! * **MK-CKKS** (baseline): each device encrypts under its own `b_i`; the
//!   sum keeps every `c1` separately and partial decryptions
//!   `mu_i = c1_i*s_i + e*_i` are taken per device. A server holding both
//!   `c0_i` and `mu_i` recovers `m_i`, which is the leak xMK-CKKS removes.
//!
//! Every object carries a fingerprint of the key or sum it is bound to, and
//! mixing objects across keys or sums is an error rather than garbage.

use alloc::string::ToString;
use alloc::vec::Vec;
use rand::RngCore;
use sha2::{Digest, Sha256};

use crate::encoder::EncodingParams;
use crate::error::{Error, Result};
use crate::fingerprint::Fingerprint;
use crate::ring::{Domain, Ring, RingElement, RingParams};
use crate::sampling::{self, sample_gaussian, sample_ternary, TAIL_CUT};

/// Prime `2^61 - 376831`, congruent to 1 mod 2^14 so it serves n up to 8192.
pub const Q61: u64 = 2305843009213317121;
pub const SIGMA_ERR: f64 = 3.2;
/// Flooding deviation relative to the error deviation.
pub const FLOOD_FACTOR: f64 = (1u64 << 20) as f64;

const KEY_DOMAIN: &[u8] = b"xmk/pk";
const AGG_DOMAIN: &[u8] = b"xmk/apk";
const SUM_DOMAIN: &[u8] = b"xmk/csum1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// n = 8, q = 3329. Ring-level tests only; too small to encode anything.
    Toy,
    /// n = 2048.
    Small,
    /// n = 4096.
    Standard,
}

impl Preset {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Preset::Toy),
            "small" => Ok(Preset::Small),
            "standard" => Ok(Preset::Standard),
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::Small => "small",
            Preset::Standard => "standard",
        }
    }

    pub fn ring_params(self) -> RingParams {
        let seed: [u8; 32] = Sha256::digest(self.name().as_bytes()).into();
        let (n, q, sigma_flood) = match self {
            Preset::Toy => (8, 3329, 10.0 * SIGMA_ERR),
            Preset::Small => (2048, Q61, FLOOD_FACTOR * SIGMA_ERR),
            Preset::Standard => (4096, Q61, FLOOD_FACTOR * SIGMA_ERR),
        };
        RingParams {
            n,
            q,
            sigma_err: SIGMA_ERR,
            sigma_flood,
            seed,
        }
    }

    pub fn scale(self) -> f64 {
        match self {
            Preset::Toy => crate::encoder::MIN_SCALE,
            Preset::Small | Preset::Standard => (1u64 << 50) as f64,
        }
    }
}

/// Public parameters: the ring, the encoding, and the CRS polynomial `a`.
pub fn setup(preset: Preset) -> Result<(Ring, EncodingParams, RingElement)> {
    let ring = Ring::new(preset.ring_params())?;
    let ep = EncodingParams {
        scale: preset.scale(),
        slots: ring.n() / 2,
    };
    let crs = sampling::crs(&ring);
    Ok((ring, ep, crs))
}

pub fn setup_named(name: &str) -> Result<(Ring, EncodingParams, RingElement)> {
    setup(Preset::from_name(name)?)
}

/// Digest of everything two parties must agree on before exchanging keys.
pub fn params_hash(ring: &Ring, ep: &EncodingParams) -> Fingerprint {
    let p = ring.params();
    let mut bytes = Vec::with_capacity(80);
    bytes.extend_from_slice(&(p.n as u64).to_le_bytes());
    bytes.extend_from_slice(&p.q.to_le_bytes());
    bytes.extend_from_slice(&p.sigma_err.to_bits().to_le_bytes());
    bytes.extend_from_slice(&p.sigma_flood.to_bits().to_le_bytes());
    bytes.extend_from_slice(&p.seed);
    bytes.extend_from_slice(&ep.scale.to_bits().to_le_bytes());
    bytes.extend_from_slice(&(ep.slots as u64).to_le_bytes());
    Fingerprint::of_bytes(b"xmk/params", &bytes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SecretKey {
    pub s: RingElement,
    pub device_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PublicKeyShare {
    pub b: RingElement,
    pub device_id: u32,
}

impl PublicKeyShare {
    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint::of_element(KEY_DOMAIN, &self.b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedPublicKey {
    pub b_tilde: RingElement,
    /// Ascending, distinct.
    pub contributors: Vec<u32>,
}

impl AggregatedPublicKey {
    pub fn fingerprint(&self) -> Fingerprint {
        let mut bytes = self.b_tilde.to_bytes();
        for id in &self.contributors {
            bytes.extend_from_slice(&id.to_le_bytes());
        }
        Fingerprint::of_bytes(AGG_DOMAIN, &bytes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ciphertext {
    pub c0: RingElement,
    pub c1: RingElement,
    pub key_fingerprint: Fingerprint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CiphertextSum {
    pub c_sum0: RingElement,
    pub c_sum1: RingElement,
    pub count: u32,
    pub key_fingerprint: Fingerprint,
}

impl CiphertextSum {
    /// The fingerprint decryption shares for this sum must carry.
    pub fn sum_fingerprint(&self) -> Fingerprint {
        sum_fingerprint(&self.c_sum1)
    }

    /// The part of the sum every device needs to compute its share.
    pub fn broadcast(&self) -> SumBroadcast {
        SumBroadcast {
            c_sum1: self.c_sum1.clone(),
            count: self.count,
            key_fingerprint: self.key_fingerprint,
        }
    }
}

/// `C_sum1` as sent to the devices, with the key and contributor count it
/// was summed under.
#[derive(Debug, Clone, PartialEq)]
pub struct SumBroadcast {
    pub c_sum1: RingElement,
    pub count: u32,
    pub key_fingerprint: Fingerprint,
}

pub fn sum_fingerprint(c_sum1: &RingElement) -> Fingerprint {
    Fingerprint::of_element(SUM_DOMAIN, c_sum1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecryptionShare {
    pub d: RingElement,
    pub device_id: u32,
    pub sum_fingerprint: Fingerprint,
}

/// Baseline MK-CKKS sum: one shared `c0` and every device's `c1`.
#[derive(Debug, Clone, PartialEq)]
pub struct MkCiphertextSum {
    pub c0_sum: RingElement,
    pub c1_list: Vec<RingElement>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum Noise {
    Sampled,
    #[allow(dead_code)]
    Zero,
}

fn coeff(ring: &Ring, x: &RingElement) -> Result<()> {
    ring.check(x)?;
    if x.domain() != Domain::Coefficient {
        return Err(Error::NotCoefficientDomain);
    }
    Ok(())
}

fn error_term<R: RngCore + ?Sized>(
    ring: &Ring,
    sigma: f64,
    noise: Noise,
    rng: &mut R,
) -> Result<RingElement> {
    match noise {
        Noise::Sampled => sample_gaussian(ring, sigma, rng),
        Noise::Zero => Ok(ring.zero()),
    }
}

pub(crate) fn keygen_with<R: RngCore + ?Sized>(
    ring: &Ring,
    crs: &RingElement,
    rng: &mut R,
    device_id: u32,
    noise: Noise,
) -> Result<(SecretKey, PublicKeyShare)> {
    coeff(ring, crs)?;
    let s = sample_ternary(ring, rng);
    let e = error_term(ring, ring.params().sigma_err, noise, rng)?;
    let b = ring.add(&ring.negate(&ring.mul(&s, crs)?)?, &e)?;
    Ok((SecretKey { s, device_id }, PublicKeyShare { b, device_id }))
}

/// Samples `s <- ternary` and returns it with `b = -s*a + e`, `e <- psi`.
pub fn keygen<R: RngCore + ?Sized>(
    ring: &Ring,
    crs: &RingElement,
    rng: &mut R,
    device_id: u32,
) -> Result<(SecretKey, PublicKeyShare)> {
    keygen_with(ring, crs, rng, device_id, Noise::Sampled)
}

/// `b~ = sum b_i` over at least two devices with distinct ids.
pub fn aggregate_public_keys(
    ring: &Ring,
    shares: &[PublicKeyShare],
) -> Result<AggregatedPublicKey> {
    if shares.len() < 2 {
        return Err(Error::TooFewKeyShares {
            min: 2,
            got: shares.len(),
        });
    }
    let mut contributors: Vec<u32> = shares.iter().map(|s| s.device_id).collect();
    contributors.sort_unstable();
    if let Some(w) = contributors.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::DuplicateDevice(w[0]));
    }
    for share in shares {
        coeff(ring, &share.b)?;
    }
    let b_tilde = ring.sum(shares.iter().map(|s| &s.b))?;
    Ok(AggregatedPublicKey {
        b_tilde,
        contributors,
    })
}

fn encrypt_under<R: RngCore + ?Sized>(
    ring: &Ring,
    m: &RingElement,
    b: &RingElement,
    crs: &RingElement,
    key_fingerprint: Fingerprint,
    rng: &mut R,
    noise: Noise,
) -> Result<Ciphertext> {
    coeff(ring, m)?;
    coeff(ring, b)?;
    coeff(ring, crs)?;
    let sigma = ring.params().sigma_err;
    let v = match noise {
        Noise::Sampled => sample_ternary(ring, rng),
        Noise::Zero => ring.zero(),
    };
    let e0 = error_term(ring, sigma, noise, rng)?;
    let e1 = error_term(ring, sigma, noise, rng)?;
    let v_ntt = ring.to_ntt(&v)?;
    let vb = ring.to_coeff(&ring.mul(&v_ntt, &ring.to_ntt(b)?)?)?;
    let va = ring.to_coeff(&ring.mul(&v_ntt, &ring.to_ntt(crs)?)?)?;
    let mut c0 = ring.add(&vb, m)?;
    ring.add_assign(&mut c0, &e0)?;
    let c1 = ring.add(&va, &e1)?;
    Ok(Ciphertext {
        c0,
        c1,
        key_fingerprint,
    })
}

pub(crate) fn encrypt_with<R: RngCore + ?Sized>(
    ring: &Ring,
    m: &RingElement,
    apk: &AggregatedPublicKey,
    crs: &RingElement,
    rng: &mut R,
    noise: Noise,
) -> Result<Ciphertext> {
    encrypt_under(ring, m, &apk.b_tilde, crs, apk.fingerprint(), rng, noise)
}

/// `(v*b~ + m + e0, v*a + e1)` with fresh `v <- ternary`, `e0, e1 <- psi`.
pub fn encrypt<R: RngCore + ?Sized>(
    ring: &Ring,
    m: &RingElement,
    apk: &AggregatedPublicKey,
    crs: &RingElement,
    rng: &mut R,
) -> Result<Ciphertext> {
    encrypt_with(ring, m, apk, crs, rng, Noise::Sampled)
}

/// Componentwise sum of ciphertexts that were all encrypted under one key.
pub fn add_ciphertexts(ring: &Ring, cts: &[Ciphertext]) -> Result<CiphertextSum> {
    let first = cts.first().ok_or(Error::Empty("no ciphertexts to add"))?;
    if cts
        .iter()
        .any(|c| c.key_fingerprint != first.key_fingerprint)
    {
        return Err(Error::MixedKeyAggregation);
    }
    Ok(CiphertextSum {
        c_sum0: ring.sum(cts.iter().map(|c| &c.c0))?,
        c_sum1: ring.sum(cts.iter().map(|c| &c.c1))?,
        count: cts.len() as u32,
        key_fingerprint: first.key_fingerprint,
    })
}

pub(crate) fn share_for_with<R: RngCore + ?Sized>(
    ring: &Ring,
    sk: &SecretKey,
    apk: &AggregatedPublicKey,
    c_sum1: &RingElement,
    rng: &mut R,
    noise: Noise,
) -> Result<DecryptionShare> {
    if apk.contributors.binary_search(&sk.device_id).is_err() {
        return Err(Error::NotAContributor(sk.device_id));
    }
    coeff(ring, c_sum1)?;
    let flood = error_term(ring, ring.params().sigma_flood, noise, rng)?;
    let d = ring.add(&ring.mul(&sk.s, c_sum1)?, &flood)?;
    Ok(DecryptionShare {
        d,
        device_id: sk.device_id,
        sum_fingerprint: sum_fingerprint(c_sum1),
    })
}

/// `D_i = s_i*C_sum1 + e*`, `e* <- phi`, computed from the broadcast `C_sum1` alone.
pub fn decryption_share_for<R: RngCore + ?Sized>(
    ring: &Ring,
    sk: &SecretKey,
    apk: &AggregatedPublicKey,
    c_sum1: &RingElement,
    rng: &mut R,
) -> Result<DecryptionShare> {
    share_for_with(ring, sk, apk, c_sum1, rng, Noise::Sampled)
}

pub fn decryption_share<R: RngCore + ?Sized>(
    ring: &Ring,
    sk: &SecretKey,
    apk: &AggregatedPublicKey,
    cs: &CiphertextSum,
    rng: &mut R,
) -> Result<DecryptionShare> {
    if cs.key_fingerprint != apk.fingerprint() {
        return Err(Error::FingerprintMismatch(
            "sum was not produced under this key",
        ));
    }
    decryption_share_for(ring, sk, apk, &cs.c_sum1, rng)
}

/// `C_sum0 + sum D_i`. Requires exactly one share per contributor of `apk`.
pub fn merge(
    ring: &Ring,
    apk: &AggregatedPublicKey,
    cs: &CiphertextSum,
    shares: &[DecryptionShare],
) -> Result<RingElement> {
    if cs.key_fingerprint != apk.fingerprint() {
        return Err(Error::FingerprintMismatch(
            "sum was not produced under this key",
        ));
    }
    let expected = cs.sum_fingerprint();
    let mut seen: Vec<u32> = Vec::with_capacity(shares.len());
    for share in shares {
        if share.sum_fingerprint != expected {
            return Err(Error::FingerprintMismatch(
                "share is bound to a different sum",
            ));
        }
        if apk.contributors.binary_search(&share.device_id).is_err() {
            return Err(Error::UnexpectedShare(share.device_id));
        }
        if seen.contains(&share.device_id) {
            return Err(Error::DuplicateDevice(share.device_id));
        }
        seen.push(share.device_id);
    }
    let missing: Vec<u32> = apk
        .contributors
        .iter()
        .copied()
        .filter(|id| !seen.contains(id))
        .collect();
    if !missing.is_empty() {
        return Err(Error::IncompleteQuorum { missing });
    }
    let mut acc = cs.c_sum0.clone();
    for share in shares {
        coeff(ring, &share.d)?;
        ring.add_assign(&mut acc, &share.d)?;
    }
    Ok(acc)
}

pub(crate) fn mk_encrypt_with<R: RngCore + ?Sized>(
    ring: &Ring,
    m: &RingElement,
    pk: &PublicKeyShare,
    crs: &RingElement,
    rng: &mut R,
    noise: Noise,
) -> Result<Ciphertext> {
    encrypt_under(ring, m, &pk.b, crs, pk.fingerprint(), rng, noise)
}

/// Baseline encryption under a single device's own public key.
pub fn mk_encrypt<R: RngCore + ?Sized>(
    ring: &Ring,
    m: &RingElement,
    pk: &PublicKeyShare,
    crs: &RingElement,
    rng: &mut R,
) -> Result<Ciphertext> {
    mk_encrypt_with(ring, m, pk, crs, rng, Noise::Sampled)
}

/// `c0 + c1*s`, for a ciphertext under the holder's own key.
pub fn decrypt_individual(ring: &Ring, ct: &Ciphertext, sk: &SecretKey) -> Result<RingElement> {
    coeff(ring, &ct.c0)?;
    ring.add(&ct.c0, &ring.mul(&ct.c1, &sk.s)?)
}

/// Baseline sum `(sum c0_i, c1_1, ..., c1_N)`; one ciphertext per distinct key.
pub fn mk_add(ring: &Ring, cts: &[Ciphertext]) -> Result<MkCiphertextSum> {
    if cts.is_empty() {
        return Err(Error::Empty("no ciphertexts to add"));
    }
    let mut keys: Vec<Fingerprint> = cts.iter().map(|c| c.key_fingerprint).collect();
    keys.sort_unstable();
    if keys.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::FingerprintMismatch(
            "two baseline ciphertexts share one key",
        ));
    }
    Ok(MkCiphertextSum {
        c0_sum: ring.sum(cts.iter().map(|c| &c.c0))?,
        c1_list: cts.iter().map(|c| c.c1.clone()).collect(),
    })
}

pub(crate) fn mk_part_dec_with<R: RngCore + ?Sized>(
    ring: &Ring,
    sk: &SecretKey,
    c1: &RingElement,
    rng: &mut R,
    noise: Noise,
) -> Result<DecryptionShare> {
    coeff(ring, c1)?;
    let flood = error_term(ring, ring.params().sigma_flood, noise, rng)?;
    Ok(DecryptionShare {
        d: ring.add(&ring.mul(c1, &sk.s)?, &flood)?,
        device_id: sk.device_id,
        sum_fingerprint: sum_fingerprint(c1),
    })
}

/// Baseline partial decryption `mu_i = c1_i*s_i + e*`.
pub fn mk_part_dec<R: RngCore + ?Sized>(
    ring: &Ring,
    sk: &SecretKey,
    c1: &RingElement,
    rng: &mut R,
) -> Result<DecryptionShare> {
    mk_part_dec_with(ring, sk, c1, rng, Noise::Sampled)
}

/// Baseline merge `sum c0_i + sum mu_i`, one partial decryption per `c1`.
pub fn mk_merge(
    ring: &Ring,
    mks: &MkCiphertextSum,
    shares: &[DecryptionShare],
) -> Result<RingElement> {
    if shares.len() != mks.c1_list.len() {
        return Err(Error::LengthMismatch {
            expected: mks.c1_list.len(),
            actual: shares.len(),
        });
    }
    let mut acc = mks.c0_sum.clone();
    let mut used = alloc::vec![false; shares.len()];
    for c1 in &mks.c1_list {
        let fp = sum_fingerprint(c1);
        let idx = shares
            .iter()
            .enumerate()
            .position(|(i, s)| !used[i] && s.sum_fingerprint == fp)
            .ok_or(Error::FingerprintMismatch(
                "no partial decryption for one of the c1 components",
            ))?;
        used[idx] = true;
        coeff(ring, &shares[idx].d)?;
        ring.add_assign(&mut acc, &shares[idx].d)?;
    }
    Ok(acc)
}

/// Worst-case size of the merge error, per coefficient and per decoded slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseBudget {
    /// Infinity-norm bound on the error polynomial's coefficients.
    pub coeff_bound: f64,
    /// Bound on one slot before dividing by the scale: `n * coeff_bound`.
    pub bound_per_slot: f64,
    /// `bound_per_slot / scale`, in the units of the decoded values.
    pub decoded_bound: f64,
    /// Whether the slot bound stays below `scale / 2`.
    pub ok: bool,
}

/// Bounds `sum v * sum e + sum e0 + sum (s*e1 + e*)` using `|ternary| <= 1`
/// and the tail cut on every Gaussian.
pub fn noise_budget(ring: &Ring, ep: &EncodingParams, devices: usize) -> NoiseBudget {
    let n = ring.n() as f64;
    let big_n = devices.max(1) as f64;
    let err = TAIL_CUT * ring.params().sigma_err;
    let flood = TAIL_CUT * ring.params().sigma_flood;
    let coeff_bound = big_n * big_n * n * err + big_n * err + big_n * (n * err + flood);
    let bound_per_slot = n * coeff_bound;
    NoiseBudget {
        coeff_bound,
        bound_per_slot,
        decoded_bound: bound_per_slot / ep.scale,
        ok: bound_per_slot < ep.scale / 2.0,
    }
}

/// Entry points with the error terms pinned to zero, for exact-arithmetic tests.
#[cfg(any(test, feature = "test-hooks"))]
pub mod hooks {
    use super::*;

    pub fn keygen_noiseless<R: RngCore + ?Sized>(
        ring: &Ring,
        crs: &RingElement,
        rng: &mut R,
        device_id: u32,
    ) -> Result<(SecretKey, PublicKeyShare)> {
        keygen_with(ring, crs, rng, device_id, Noise::Zero)
    }

    pub fn encrypt_noiseless(
        ring: &Ring,
        m: &RingElement,
        apk: &AggregatedPublicKey,
        crs: &RingElement,
    ) -> Result<Ciphertext> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        encrypt_with(ring, m, apk, crs, &mut rng, Noise::Zero)
    }

    pub fn mk_encrypt_noiseless(
        ring: &Ring,
        m: &RingElement,
        pk: &PublicKeyShare,
        crs: &RingElement,
    ) -> Result<Ciphertext> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        mk_encrypt_with(ring, m, pk, crs, &mut rng, Noise::Zero)
    }

    /// Encrypts with a sampled `v` but zero `e0`, `e1`.
    pub fn encrypt_errorless<R: RngCore + ?Sized>(
        ring: &Ring,
        m: &RingElement,
        b: &RingElement,
        crs: &RingElement,
        key_fingerprint: Fingerprint,
        rng: &mut R,
    ) -> Result<Ciphertext> {
        let v = sample_ternary(ring, rng);
        let c0 = ring.add(&ring.mul(&v, b)?, m)?;
        let c1 = ring.mul(&v, crs)?;
        Ok(Ciphertext {
            c0,
            c1,
            key_fingerprint,
        })
    }

    pub fn decryption_share_noiseless(
        ring: &Ring,
        sk: &SecretKey,
        apk: &AggregatedPublicKey,
        cs: &CiphertextSum,
    ) -> Result<DecryptionShare> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        share_for_with(ring, sk, apk, &cs.c_sum1, &mut rng, Noise::Zero)
    }

    pub fn mk_part_dec_noiseless(
        ring: &Ring,
        sk: &SecretKey,
        c1: &RingElement,
    ) -> Result<DecryptionShare> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        mk_part_dec_with(ring, sk, c1, &mut rng, Noise::Zero)
    }
}
