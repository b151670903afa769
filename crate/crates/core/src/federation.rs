//! Whole-model encryption, aggregation and the in-process federated loop.
//!
//! A model larger than one plaintext is split into slot-sized chunks and
//! each chunk is its own ciphertext. The helpers here work on lists of
//! chunks, and are shared by the networked devices and the in-process
//! pipeline so both produce the same bytes from the same seeds.

use alloc::vec::Vec;
use rand::RngCore;

use crate::encoder::{chunk_count, chunk_weights, unchunk, Encoder, EncodingParams, PlainVector};
use crate::error::{Error, Result};
use crate::fedavg::{self, ModelLayout, ModelWeights, SynthData, TrainingConfig};
use crate::mkhe::{
    self, AggregatedPublicKey, Ciphertext, CiphertextSum, DecryptionShare, MkCiphertextSum, Preset,
    PublicKeyShare, SecretKey,
};
use crate::ring::{Ring, RingElement};
use crate::seeds::{derive_rng, derive_seed, Purpose};

/// Ring, encoder and CRS shared by every party.
#[derive(Debug, Clone)]
pub struct CryptoContext {
    pub ring: Ring,
    pub encoder: Encoder,
    pub crs: RingElement,
}

impl CryptoContext {
    pub fn new(preset: Preset) -> Result<Self> {
        let (ring, ep, crs) = mkhe::setup(preset)?;
        Self::from_parts(ring, ep, crs)
    }

    pub fn from_parts(ring: Ring, ep: EncodingParams, crs: RingElement) -> Result<Self> {
        Ok(Self {
            encoder: Encoder::new(&ring, ep)?,
            ring,
            crs,
        })
    }

    pub fn slots(&self) -> usize {
        self.encoder.params().slots
    }

    pub fn encoding(&self) -> &EncodingParams {
        self.encoder.params()
    }

    pub fn chunks_for(&self, weights: usize) -> usize {
        chunk_count(weights, self.slots())
    }

    pub fn encode_weights(&self, weights: &[f64]) -> Result<Vec<RingElement>> {
        chunk_weights(weights, self.slots())
            .iter()
            .map(|c| self.encoder.encode(c))
            .collect()
    }

    pub fn decode_weights(&self, plaintexts: &[RingElement], len: usize) -> Result<Vec<f64>> {
        let chunks: Vec<PlainVector> = plaintexts
            .iter()
            .map(|p| self.encoder.decode(p))
            .collect::<Result<_>>()?;
        unchunk(&chunks, len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scheme {
    Plain,
    XmkCkks,
    MkCkks,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Plain, Scheme::XmkCkks, Scheme::MkCkks];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Plain => "plain",
            Scheme::XmkCkks => "xmkckks",
            Scheme::MkCkks => "mkckks",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }
}

#[derive(Debug, Clone)]
pub struct Participant {
    pub sk: SecretKey,
    pub pk: PublicKeyShare,
}

impl Participant {
    pub fn id(&self) -> u32 {
        self.sk.device_id
    }
}

/// Key pair of one device, drawn from its key-generation stream.
pub fn device_keygen(ctx: &CryptoContext, base_seed: u64, device_id: u32) -> Result<Participant> {
    let mut rng = derive_rng(base_seed, device_id, Purpose::KeyGen, 0);
    let (sk, pk) = mkhe::keygen(&ctx.ring, &ctx.crs, &mut rng, device_id)?;
    Ok(Participant { sk, pk })
}

pub fn keygen_participants(
    ctx: &CryptoContext,
    ids: &[u32],
    base_seed: u64,
) -> Result<Vec<Participant>> {
    ids.iter()
        .map(|&id| device_keygen(ctx, base_seed, id))
        .collect()
}

/// Encodes and encrypts every chunk of a weight vector under the aggregated key.
pub fn encrypt_weights<R: RngCore + ?Sized>(
    ctx: &CryptoContext,
    apk: &AggregatedPublicKey,
    weights: &[f64],
    rng: &mut R,
) -> Result<Vec<Ciphertext>> {
    ctx.encode_weights(weights)?
        .iter()
        .map(|m| mkhe::encrypt(&ctx.ring, m, apk, &ctx.crs, rng))
        .collect()
}

pub fn mk_encrypt_weights<R: RngCore + ?Sized>(
    ctx: &CryptoContext,
    pk: &PublicKeyShare,
    weights: &[f64],
    rng: &mut R,
) -> Result<Vec<Ciphertext>> {
    ctx.encode_weights(weights)?
        .iter()
        .map(|m| mkhe::mk_encrypt(&ctx.ring, m, pk, &ctx.crs, rng))
        .collect()
}

fn chunks_per_update<T>(updates: &[Vec<T>]) -> Result<usize> {
    let first = updates.first().ok_or(Error::Empty("no updates"))?;
    for u in updates {
        if u.len() != first.len() {
            return Err(Error::LengthMismatch {
                expected: first.len(),
                actual: u.len(),
            });
        }
    }
    Ok(first.len())
}

/// Chunkwise homomorphic sum of every device's update.
pub fn sum_updates(ctx: &CryptoContext, updates: &[Vec<Ciphertext>]) -> Result<Vec<CiphertextSum>> {
    let chunks = chunks_per_update(updates)?;
    (0..chunks)
        .map(|c| {
            let column: Vec<Ciphertext> = updates.iter().map(|u| u[c].clone()).collect();
            mkhe::add_ciphertexts(&ctx.ring, &column)
        })
        .collect()
}

/// One decryption share per broadcast `C_sum1` chunk.
pub fn decryption_shares<R: RngCore + ?Sized>(
    ctx: &CryptoContext,
    sk: &SecretKey,
    apk: &AggregatedPublicKey,
    c_sum1: &[RingElement],
    rng: &mut R,
) -> Result<Vec<DecryptionShare>> {
    c_sum1
        .iter()
        .map(|c| mkhe::decryption_share_for(&ctx.ring, sk, apk, c, rng))
        .collect()
}

/// Merges `shares[device][chunk]` into one plaintext polynomial per chunk.
pub fn merge_updates(
    ctx: &CryptoContext,
    apk: &AggregatedPublicKey,
    sums: &[CiphertextSum],
    shares: &[Vec<DecryptionShare>],
) -> Result<Vec<RingElement>> {
    sums.iter()
        .enumerate()
        .map(|(c, sum)| {
            let column: Vec<DecryptionShare> = shares
                .iter()
                .filter_map(|per_device| per_device.get(c).cloned())
                .collect();
            mkhe::merge(&ctx.ring, apk, sum, &column)
        })
        .collect()
}

pub fn mk_sum_updates(
    ctx: &CryptoContext,
    updates: &[Vec<Ciphertext>],
) -> Result<Vec<MkCiphertextSum>> {
    let chunks = chunks_per_update(updates)?;
    (0..chunks)
        .map(|c| {
            let column: Vec<Ciphertext> = updates.iter().map(|u| u[c].clone()).collect();
            mkhe::mk_add(&ctx.ring, &column)
        })
        .collect()
}

/// Partial decryptions of one device's own `c1` components.
pub fn mk_partial_decryptions<R: RngCore + ?Sized>(
    ctx: &CryptoContext,
    sk: &SecretKey,
    own_c1: &[RingElement],
    rng: &mut R,
) -> Result<Vec<DecryptionShare>> {
    own_c1
        .iter()
        .map(|c1| mkhe::mk_part_dec(&ctx.ring, sk, c1, rng))
        .collect()
}

pub fn mk_merge_updates(
    ctx: &CryptoContext,
    sums: &[MkCiphertextSum],
    shares: &[Vec<DecryptionShare>],
) -> Result<Vec<RingElement>> {
    sums.iter()
        .enumerate()
        .map(|(c, sum)| {
            let column: Vec<DecryptionShare> = shares
                .iter()
                .filter_map(|per_device| per_device.get(c).cloned())
                .collect();
            mkhe::mk_merge(&ctx.ring, sum, &column)
        })
        .collect()
}

/// Decodes merged chunks and divides by the number of contributing devices.
pub fn merged_average(
    ctx: &CryptoContext,
    merged: &[RingElement],
    devices: usize,
    layout: ModelLayout,
) -> Result<ModelWeights> {
    if devices == 0 {
        return Err(Error::Empty("no contributing devices"));
    }
    let sum = ctx.decode_weights(merged, layout.param_count())?;
    let inv = 1.0 / devices as f64;
    ModelWeights::new(sum.iter().map(|x| x * inv).collect(), layout)
}

/// Result of one aggregation round.
#[derive(Debug, Clone)]
pub struct RoundOutput {
    pub average: ModelWeights,
    /// Merged plaintext polynomials, one per chunk (empty for the plain scheme).
    pub merged: Vec<RingElement>,
}

/// Keys and aggregated key for a fixed set of devices.
#[derive(Debug, Clone)]
pub struct Session {
    pub ctx: CryptoContext,
    pub participants: Vec<Participant>,
    pub apk: AggregatedPublicKey,
    pub base_seed: u64,
}

impl Session {
    pub fn new(ctx: CryptoContext, ids: &[u32], base_seed: u64) -> Result<Self> {
        let participants = keygen_participants(&ctx, ids, base_seed)?;
        let shares: Vec<PublicKeyShare> = participants.iter().map(|p| p.pk.clone()).collect();
        let apk = mkhe::aggregate_public_keys(&ctx.ring, &shares)?;
        Ok(Self {
            ctx,
            participants,
            apk,
            base_seed,
        })
    }

    /// Sums the locally trained models under `scheme` and returns their mean.
    /// `local[i]` belongs to `participants[i]`.
    pub fn aggregate(
        &self,
        scheme: Scheme,
        local: &[ModelWeights],
        round: u32,
    ) -> Result<RoundOutput> {
        if local.len() != self.participants.len() {
            return Err(Error::LengthMismatch {
                expected: self.participants.len(),
                actual: local.len(),
            });
        }
        let first = local.first().ok_or(Error::Empty("no local models"))?;
        let ctx = &self.ctx;
        let seed = self.base_seed;
        let merged = match scheme {
            Scheme::Plain => {
                return Ok(RoundOutput {
                    average: fedavg::average(local)?,
                    merged: Vec::new(),
                })
            }
            Scheme::XmkCkks => {
                let updates = self
                    .participants
                    .iter()
                    .zip(local)
                    .map(|(p, w)| {
                        let mut rng = derive_rng(seed, p.id(), Purpose::Encrypt, round);
                        encrypt_weights(ctx, &self.apk, &w.values, &mut rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let sums = sum_updates(ctx, &updates)?;
                let c_sum1: Vec<RingElement> = sums.iter().map(|s| s.c_sum1.clone()).collect();
                let shares = self
                    .participants
                    .iter()
                    .map(|p| {
                        let mut rng = derive_rng(seed, p.id(), Purpose::DecryptShare, round);
                        decryption_shares(ctx, &p.sk, &self.apk, &c_sum1, &mut rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                merge_updates(ctx, &self.apk, &sums, &shares)?
            }
            Scheme::MkCkks => {
                let updates = self
                    .participants
                    .iter()
                    .zip(local)
                    .map(|(p, w)| {
                        let mut rng = derive_rng(seed, p.id(), Purpose::Encrypt, round);
                        mk_encrypt_weights(ctx, &p.pk, &w.values, &mut rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let sums = mk_sum_updates(ctx, &updates)?;
                let shares = self
                    .participants
                    .iter()
                    .zip(&updates)
                    .map(|(p, own)| {
                        let mut rng = derive_rng(seed, p.id(), Purpose::DecryptShare, round);
                        let c1: Vec<RingElement> = own.iter().map(|c| c.c1.clone()).collect();
                        mk_partial_decryptions(ctx, &p.sk, &c1, &mut rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                mk_merge_updates(ctx, &sums, &shares)?
            }
        };
        let average = merged_average(ctx, &merged, local.len(), first.layout)?;
        Ok(RoundOutput { average, merged })
    }
}

/// Initial global model for a run seeded with `base_seed`.
pub fn initial_model(layout: ModelLayout, base_seed: u64) -> ModelWeights {
    ModelWeights::init(layout, derive_seed(base_seed, 0, Purpose::Init, 0))
}

/// Training configuration a device uses in `round`.
pub fn round_training(
    base: &TrainingConfig,
    base_seed: u64,
    device_id: u32,
    round: u32,
) -> TrainingConfig {
    TrainingConfig {
        seed: derive_seed(base_seed, device_id, Purpose::Training, round),
        ..*base
    }
}

#[derive(Debug, Clone)]
pub struct FederationSpec {
    pub scheme: Scheme,
    pub rounds: u32,
    pub training: TrainingConfig,
    pub layout: ModelLayout,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct FederationRun {
    /// Test accuracy of the global model after each round.
    pub accuracy: Vec<f64>,
    pub global: ModelWeights,
}

/// Runs `spec.rounds` rounds of federated averaging entirely in process.
/// Device `i` (1-based id) trains on `data.devices[i - 1]`.
pub fn run_federation(
    spec: &FederationSpec,
    data: &SynthData,
    ctx: &CryptoContext,
) -> Result<FederationRun> {
    run_federation_with(spec, data, ctx, |jobs| {
        jobs.iter()
            .map(|(w, d, cfg)| fedavg::local_update(w, d, cfg))
            .collect()
    })
}

/// A batch of local-training jobs: global model, device data, per-round config.
pub type TrainingJob<'a> = (&'a ModelWeights, &'a fedavg::LocalDataset, TrainingConfig);

/// As [`run_federation`], with the local-training step supplied by the caller
/// (for example to train devices in parallel). `train` must return results in
/// job order.
pub fn run_federation_with<F>(
    spec: &FederationSpec,
    data: &SynthData,
    ctx: &CryptoContext,
    mut train: F,
) -> Result<FederationRun>
where
    F: FnMut(&[TrainingJob<'_>]) -> Result<Vec<ModelWeights>>,
{
    let ids: Vec<u32> = (1..=data.devices.len() as u32).collect();
    let session = Session::new(ctx.clone(), &ids, spec.seed)?;
    let mut global = initial_model(spec.layout, spec.seed);
    let mut accuracy = Vec::with_capacity(spec.rounds as usize);
    for round in 1..=spec.rounds {
        let jobs: Vec<TrainingJob<'_>> = ids
            .iter()
            .zip(&data.devices)
            .map(|(&id, d)| {
                (
                    &global,
                    d,
                    round_training(&spec.training, spec.seed, id, round),
                )
            })
            .collect();
        let local = train(&jobs)?;
        drop(jobs);
        global = session.aggregate(spec.scheme, &local, round)?.average;
        accuracy.push(fedavg::evaluate(&global, &data.test)?);
    }
    Ok(FederationRun { accuracy, global })
}
