//! Per-phase cost curves, ciphertext size accounting and the accuracy
//! comparison between plain, xMK-CKKS and MK-CKKS federated averaging.

use std::collections::BTreeMap;
use std::io::Write;
use std::thread;
use std::time::Instant;

use rand::Rng;
use xmk_core::fedavg::{self, synth_dataset, SynthConfig};
use xmk_core::federation::{
    self, run_federation_with, CryptoContext, FederationSpec, Scheme, Session,
};
use xmk_core::mkhe::Preset;
use xmk_core::seeds::{derive_rng, Purpose};
use xmk_core::wire::{object_len, WireObject, HEADER_LEN};
use xmk_core::{Fingerprint, ModelLayout, ModelWeights, RingElement, TrainingConfig};

use crate::message::{weights_len, Body, RoundMessage, MESSAGE_OVERHEAD};

pub const DEFAULT_WEIGHT_COUNTS: [usize; 4] = [492, 4_920, 49_200, 320_000];
pub const MIN_REPS: usize = 4;

pub const BENCH_HEADER: [&str; 6] = [
    "scheme",
    "phase",
    "weight_count",
    "rep",
    "wall_time_ms",
    "bytes_on_wire",
];
pub const ACCURACY_HEADER: [&str; 4] = ["scheme", "trial", "round", "accuracy"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Encrypt,
    CipherSum,
    DecShare,
    Merge,
}

impl Phase {
    pub const ALL: [Phase; 4] = [
        Phase::Encrypt,
        Phase::CipherSum,
        Phase::DecShare,
        Phase::Merge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Encrypt => "encrypt",
            Phase::CipherSum => "cipher_sum",
            Phase::DecShare => "dec_share",
            Phase::Merge => "merge",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub scheme: Scheme,
    pub phase: Phase,
    pub weight_count: usize,
    pub rep: usize,
    pub wall_time_ms: f64,
    pub bytes_on_wire: usize,
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub preset: Preset,
    pub devices: usize,
    pub reps: usize,
    pub weight_counts: Vec<usize>,
    pub schemes: Vec<Scheme>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Standard,
            devices: 10,
            reps: MIN_REPS,
            weight_counts: DEFAULT_WEIGHT_COUNTS.to_vec(),
            schemes: Scheme::ALL.to_vec(),
            seed: 1,
        }
    }
}

/// Layout with exactly `count` parameters (one linear layer of width 1).
fn flat_layout(count: usize) -> ModelLayout {
    // input*hidden + hidden + hidden*output + output with hidden = output = 1
    ModelLayout {
        input: count - 3,
        hidden: 1,
        output: 1,
    }
}

fn random_weights(count: usize, seed: u64, stream: u32) -> ModelWeights {
    let mut rng = derive_rng(seed, stream, Purpose::Data, 0);
    let layout = flat_layout(count);
    let values = (0..layout.param_count())
        .map(|_| rng.gen_range(-1.0..=1.0))
        .collect();
    ModelWeights::new(values, layout).expect("layout matches")
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

fn message_len(body: Body) -> usize {
    RoundMessage::new(1, 1, body).encode().len()
}

/// Runs every `(scheme, weight count, rep)` cell. Phases are timed one at a
/// time on the calling thread; per-device phases report the mean over devices.
pub fn run_bench(
    cfg: &BenchConfig,
    mut progress: impl FnMut(&BenchRecord),
) -> anyhow::Result<Vec<BenchRecord>> {
    anyhow::ensure!(
        cfg.reps >= MIN_REPS,
        "at least {MIN_REPS} repetitions are required"
    );
    anyhow::ensure!(cfg.devices >= 2, "at least two devices are required");
    anyhow::ensure!(
        cfg.weight_counts.iter().all(|&w| w >= 4),
        "weight counts must be at least 4"
    );
    let ctx = CryptoContext::new(cfg.preset)?;
    let ids: Vec<u32> = (1..=cfg.devices as u32).collect();
    let session = Session::new(ctx, &ids, cfg.seed)?;
    let mut out = Vec::new();
    for &scheme in &cfg.schemes {
        // warm caches and allocator before the timed cells
        bench_cell(&session, scheme, cfg.weight_counts[0], 0, cfg.seed)?;
        for &count in &cfg.weight_counts {
            for rep in 0..cfg.reps {
                for r in bench_cell(&session, scheme, count, rep, cfg.seed)? {
                    progress(&r);
                    out.push(r);
                }
            }
        }
    }
    Ok(out)
}

fn bench_cell(
    session: &Session,
    scheme: Scheme,
    count: usize,
    rep: usize,
    seed: u64,
) -> anyhow::Result<Vec<BenchRecord>> {
    let ctx = &session.ctx;
    let n = session.participants.len();
    let local: Vec<ModelWeights> = (0..n)
        .map(|i| random_weights(count, seed ^ ((rep as u64) << 32), i as u32))
        .collect();
    let layout = local[0].layout;
    let round = rep as u32 + 1;
    let rec = |phase, wall_time_ms, bytes_on_wire| BenchRecord {
        scheme,
        phase,
        weight_count: count,
        rep,
        wall_time_ms,
        bytes_on_wire,
    };

    let records = match scheme {
        Scheme::Plain => {
            let t = Instant::now();
            let uploads: Vec<Vec<u8>> = local
                .iter()
                .map(|w| RoundMessage::new(round, 1, Body::GlobalModel(w.clone())).encode())
                .collect();
            let encrypt = ms(t) / n as f64;
            let t = Instant::now();
            let avg = fedavg::average(&local)?;
            let sum_ms = ms(t);
            let result = message_len(Body::RoundResult {
                weights: avg,
                merged_fingerprint: Fingerprint::ZERO,
            });
            vec![
                rec(Phase::Encrypt, encrypt, uploads[0].len()),
                rec(Phase::CipherSum, sum_ms, 0),
                rec(Phase::DecShare, 0.0, 0),
                rec(Phase::Merge, 0.0, result),
            ]
        }
        Scheme::XmkCkks => {
            let t = Instant::now();
            let updates = session
                .participants
                .iter()
                .zip(&local)
                .map(|(p, w)| {
                    let mut rng = derive_rng(seed, p.id(), Purpose::Encrypt, round);
                    federation::encrypt_weights(ctx, &session.apk, &w.values, &mut rng)
                })
                .collect::<xmk_core::Result<Vec<_>>>()?;
            let encrypt = ms(t) / n as f64;
            let update_bytes = message_len(Body::EncryptedUpdate(updates[0].clone()));

            let t = Instant::now();
            let sums = federation::sum_updates(ctx, &updates)?;
            let sum_ms = ms(t);
            let broadcast: Vec<_> = sums.iter().map(|s| s.broadcast()).collect();
            let c_sum1: Vec<RingElement> = sums.iter().map(|s| s.c_sum1.clone()).collect();
            let csum_bytes = message_len(Body::CSum1Broadcast(broadcast));

            let t = Instant::now();
            let shares = session
                .participants
                .iter()
                .map(|p| {
                    let mut rng = derive_rng(seed, p.id(), Purpose::DecryptShare, round);
                    federation::decryption_shares(ctx, &p.sk, &session.apk, &c_sum1, &mut rng)
                })
                .collect::<xmk_core::Result<Vec<_>>>()?;
            let share_ms = ms(t) / n as f64;
            let share_bytes = message_len(Body::DecShare(shares[0].clone()));

            let t = Instant::now();
            let merged = federation::merge_updates(ctx, &session.apk, &sums, &shares)?;
            let avg = federation::merged_average(ctx, &merged, n, layout)?;
            let merge_ms = ms(t);
            let result = message_len(Body::RoundResult {
                weights: avg,
                merged_fingerprint: Fingerprint::ZERO,
            });
            vec![
                rec(Phase::Encrypt, encrypt, update_bytes),
                rec(Phase::CipherSum, sum_ms, csum_bytes),
                rec(Phase::DecShare, share_ms, share_bytes),
                rec(Phase::Merge, merge_ms, result),
            ]
        }
        Scheme::MkCkks => {
            let t = Instant::now();
            let updates = session
                .participants
                .iter()
                .zip(&local)
                .map(|(p, w)| {
                    let mut rng = derive_rng(seed, p.id(), Purpose::Encrypt, round);
                    federation::mk_encrypt_weights(ctx, &p.pk, &w.values, &mut rng)
                })
                .collect::<xmk_core::Result<Vec<_>>>()?;
            let encrypt = ms(t) / n as f64;
            let update_bytes = message_len(Body::EncryptedUpdate(updates[0].clone()));

            let t = Instant::now();
            let sums = federation::mk_sum_updates(ctx, &updates)?;
            let sum_ms = ms(t);
            let sum_bytes: usize = sums.iter().map(|s| s.to_bytes().len()).sum();

            let t = Instant::now();
            let shares = session
                .participants
                .iter()
                .zip(&updates)
                .map(|(p, own)| {
                    let mut rng = derive_rng(seed, p.id(), Purpose::DecryptShare, round);
                    let c1: Vec<RingElement> = own.iter().map(|c| c.c1.clone()).collect();
                    federation::mk_partial_decryptions(ctx, &p.sk, &c1, &mut rng)
                })
                .collect::<xmk_core::Result<Vec<_>>>()?;
            let share_ms = ms(t) / n as f64;
            let share_bytes = message_len(Body::DecShare(shares[0].clone()));

            let t = Instant::now();
            let merged = federation::mk_merge_updates(ctx, &sums, &shares)?;
            let avg = federation::merged_average(ctx, &merged, n, layout)?;
            let merge_ms = ms(t);
            let result = message_len(Body::RoundResult {
                weights: avg,
                merged_fingerprint: Fingerprint::ZERO,
            });
            vec![
                rec(Phase::Encrypt, encrypt, update_bytes),
                rec(Phase::CipherSum, sum_ms, sum_bytes),
                rec(Phase::DecShare, share_ms, share_bytes),
                rec(Phase::Merge, merge_ms, result),
            ]
        }
    };
    Ok(records)
}

pub type CellKey = (Scheme, Phase, usize);

/// Median wall time per `(scheme, phase, weight count)`.
pub fn medians(records: &[BenchRecord]) -> BTreeMap<CellKey, f64> {
    let mut cells: BTreeMap<CellKey, Vec<f64>> = BTreeMap::new();
    for r in records {
        cells
            .entry((r.scheme, r.phase, r.weight_count))
            .or_default()
            .push(r.wall_time_ms);
    }
    cells
        .into_iter()
        .map(|(k, mut v)| {
            v.sort_by(f64::total_cmp);
            let m = v.len() / 2;
            let median = if v.len() % 2 == 0 {
                (v[m - 1] + v[m]) / 2.0
            } else {
                v[m]
            };
            (k, median)
        })
        .collect()
}

/// Cells of `scheme` whose median drops as the weight count grows.
pub fn monotonicity_violations(medians: &BTreeMap<CellKey, f64>, scheme: Scheme) -> Vec<String> {
    let mut out = Vec::new();
    for phase in Phase::ALL {
        let curve: Vec<(usize, f64)> = medians
            .iter()
            .filter(|((s, p, _), _)| *s == scheme && *p == phase)
            .map(|((_, _, w), t)| (*w, *t))
            .collect();
        for pair in curve.windows(2) {
            if pair[1].1 < pair[0].1 {
                out.push(format!(
                    "{} {}: {:.3} ms at {} weights > {:.3} ms at {}",
                    scheme.name(),
                    phase.name(),
                    pair[0].1,
                    pair[0].0,
                    pair[1].1,
                    pair[1].0
                ));
            }
        }
    }
    out
}

pub fn write_bench_csv<W: Write>(w: W, records: &[BenchRecord]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(BENCH_HEADER)?;
    for r in records {
        out.write_record([
            r.scheme.name().to_string(),
            r.phase.name().to_string(),
            r.weight_count.to_string(),
            r.rep.to_string(),
            format!("{:.6}", r.wall_time_ms),
            r.bytes_on_wire.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Serialized size of one object, predicted and measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SizeEntry {
    /// Ring elements per chunk recovered from the measured byte length.
    pub elements_per_chunk: usize,
    pub computed_bytes: usize,
    pub measured_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SizeReport {
    pub preset: Preset,
    pub devices: usize,
    pub weight_count: usize,
    pub chunks: usize,
    pub element_bytes: usize,
    pub update: SizeEntry,
    pub csum1: SizeEntry,
    pub dec_share: SizeEntry,
    pub mk_sum: SizeEntry,
}

impl SizeReport {
    pub fn entries(&self) -> [(&'static str, SizeEntry); 4] {
        [
            ("encrypted_update", self.update),
            ("csum1_broadcast", self.csum1),
            ("dec_share", self.dec_share),
            ("mkckks_sum", self.mk_sum),
        ]
    }
}

/// Encodes real objects for `devices` participants and compares their byte
/// lengths with the size formulas.
pub fn measure_sizes(
    preset: Preset,
    devices: usize,
    weight_count: usize,
) -> anyhow::Result<SizeReport> {
    anyhow::ensure!(devices >= 2, "at least two devices are required");
    anyhow::ensure!(weight_count >= 4, "weight count must be at least 4");
    let ctx = CryptoContext::new(preset)?;
    let ids: Vec<u32> = (1..=devices as u32).collect();
    let session = Session::new(ctx, &ids, 3)?;
    let ctx = &session.ctx;
    let n = ctx.ring.n();
    let elem = RingElement::serialized_len(n);
    let chunks = ctx.chunks_for(weight_count);
    let w = random_weights(weight_count, 3, 0);

    let mut rng = derive_rng(3, 1, Purpose::Encrypt, 1);
    let xmk: Vec<_> = (0..devices)
        .map(|_| federation::encrypt_weights(ctx, &session.apk, &w.values, &mut rng))
        .collect::<xmk_core::Result<_>>()?;
    let sums = federation::sum_updates(ctx, &xmk)?;
    let c_sum1: Vec<RingElement> = sums.iter().map(|s| s.c_sum1.clone()).collect();
    let shares = federation::decryption_shares(
        ctx,
        &session.participants[0].sk,
        &session.apk,
        &c_sum1,
        &mut rng,
    )?;
    let mk: Vec<_> = session
        .participants
        .iter()
        .map(|p| federation::mk_encrypt_weights(ctx, &p.pk, &w.values, &mut rng))
        .collect::<xmk_core::Result<_>>()?;
    let mk_sums = federation::mk_sum_updates(ctx, &mk)?;

    // message framing plus the u32 object count
    let msg_overhead = MESSAGE_OVERHEAD + 4;
    let entry = |elements: usize, overhead: usize, measured: usize| {
        let per_chunk = (measured - overhead) / chunks;
        SizeEntry {
            elements_per_chunk: if (measured - overhead) % chunks == 0
                && (per_chunk - HEADER_LEN) % elem == 0
            {
                (per_chunk - HEADER_LEN) / elem
            } else {
                usize::MAX
            },
            computed_bytes: overhead + chunks * object_len(n, elements),
            measured_bytes: measured,
        }
    };
    let broadcast = sums.iter().map(|s| s.broadcast()).collect();
    Ok(SizeReport {
        preset,
        devices,
        weight_count,
        chunks,
        element_bytes: elem,
        update: entry(
            2,
            msg_overhead,
            message_len(Body::EncryptedUpdate(xmk[0].clone())),
        ),
        csum1: entry(
            1,
            msg_overhead,
            message_len(Body::CSum1Broadcast(broadcast)),
        ),
        dec_share: entry(1, msg_overhead, message_len(Body::DecShare(shares))),
        mk_sum: entry(
            devices + 1,
            0,
            mk_sums.iter().map(|s| s.to_bytes().len()).sum(),
        ),
    })
}

/// Plaintext weight upload, for comparison with the encrypted sizes.
pub fn plain_update_bytes(weight_count: usize) -> usize {
    MESSAGE_OVERHEAD + weights_len(weight_count)
}

#[derive(Debug, Clone)]
pub struct AccuracyConfig {
    pub preset: Preset,
    pub devices: usize,
    pub rounds: u32,
    pub training: TrainingConfig,
    pub trials: usize,
    pub seed: u64,
    pub synth: SynthConfig,
    pub schemes: Vec<Scheme>,
    /// Accuracy used for the rounds-to-threshold statistic.
    pub threshold: f64,
}

impl Default for AccuracyConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Standard,
            devices: 10,
            rounds: 10,
            training: TrainingConfig::default(),
            trials: 5,
            seed: 1,
            synth: SynthConfig::default(),
            schemes: Scheme::ALL.to_vec(),
            threshold: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyRecord {
    pub scheme: Scheme,
    pub trial: usize,
    pub round: u32,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeSummary {
    pub scheme: Scheme,
    pub final_mean: f64,
    pub final_std: f64,
    pub valid_trials: usize,
    pub invalid_trials: Vec<(usize, String)>,
    /// Mean first round reaching the threshold; trials never reaching it
    /// count as `rounds + 1`.
    pub rounds_to_threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyReport {
    pub records: Vec<AccuracyRecord>,
    pub summaries: Vec<SchemeSummary>,
}

impl AccuracyReport {
    pub fn summary(&self, scheme: Scheme) -> Option<&SchemeSummary> {
        self.summaries.iter().find(|s| s.scheme == scheme)
    }

    pub fn final_accuracy(&self, scheme: Scheme, trial: usize) -> Option<f64> {
        self.records
            .iter()
            .filter(|r| r.scheme == scheme && r.trial == trial)
            .max_by_key(|r| r.round)
            .map(|r| r.accuracy)
    }
}

fn train_parallel(jobs: &[federation::TrainingJob<'_>]) -> xmk_core::Result<Vec<ModelWeights>> {
    thread::scope(|s| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|(w, d, cfg)| s.spawn(move || fedavg::local_update(w, d, cfg)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    })
}

/// `trials` seeded runs of every scheme on fresh synthetic data. Trial `t`
/// of every scheme shares its data and seeds, so schemes differ only in how
/// the round is aggregated. Device training runs in parallel.
pub fn run_accuracy_comparison(cfg: &AccuracyConfig) -> anyhow::Result<AccuracyReport> {
    let ctx = CryptoContext::new(cfg.preset)?;
    let mut records = Vec::new();
    let mut finals: BTreeMap<Scheme, Vec<f64>> = BTreeMap::new();
    let mut reach: BTreeMap<Scheme, Vec<u32>> = BTreeMap::new();
    let mut invalid: BTreeMap<Scheme, Vec<(usize, String)>> = BTreeMap::new();
    for trial in 0..cfg.trials {
        let data = synth_dataset(&SynthConfig {
            num_devices: cfg.devices,
            seed: cfg.synth.seed.wrapping_add(trial as u64),
            ..cfg.synth.clone()
        })?;
        for &scheme in &cfg.schemes {
            let spec = FederationSpec {
                scheme,
                rounds: cfg.rounds,
                training: cfg.training,
                layout: ModelLayout {
                    input: cfg.synth.feature_dim,
                    output: cfg.synth.num_classes,
                    ..ModelLayout::DEFAULT
                },
                seed: cfg.seed.wrapping_mul(1_000_003).wrapping_add(trial as u64),
            };
            match run_federation_with(&spec, &data, &ctx, train_parallel) {
                Ok(run) => {
                    for (i, &accuracy) in run.accuracy.iter().enumerate() {
                        records.push(AccuracyRecord {
                            scheme,
                            trial,
                            round: i as u32 + 1,
                            accuracy,
                        });
                    }
                    let hit = run
                        .accuracy
                        .iter()
                        .position(|&a| a >= cfg.threshold)
                        .map_or(cfg.rounds + 1, |i| i as u32 + 1);
                    reach.entry(scheme).or_default().push(hit);
                    finals
                        .entry(scheme)
                        .or_default()
                        .push(*run.accuracy.last().unwrap_or(&0.0));
                }
                Err(e) => invalid
                    .entry(scheme)
                    .or_default()
                    .push((trial, e.to_string())),
            }
        }
    }
    let summaries = cfg
        .schemes
        .iter()
        .map(|&scheme| {
            let f = finals.remove(&scheme).unwrap_or_default();
            let r = reach.remove(&scheme).unwrap_or_default();
            let (mean, std) = mean_std(&f);
            SchemeSummary {
                scheme,
                final_mean: mean,
                final_std: std,
                valid_trials: f.len(),
                invalid_trials: invalid.remove(&scheme).unwrap_or_default(),
                rounds_to_threshold: if r.is_empty() {
                    f64::NAN
                } else {
                    r.iter().map(|&x| x as f64).sum::<f64>() / r.len() as f64
                },
            }
        })
        .collect();
    Ok(AccuracyReport { records, summaries })
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (mean, var.sqrt())
}

pub fn write_accuracy_csv<W: Write>(w: W, records: &[AccuracyRecord]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(ACCURACY_HEADER)?;
    for r in records {
        out.write_record([
            r.scheme.name().to_string(),
            r.trial.to_string(),
            r.round.to_string(),
            format!("{:.6}", r.accuracy),
        ])?;
    }
    out.flush()?;
    Ok(())
}
