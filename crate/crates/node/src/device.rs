//! Device side of the aggregation protocol.

use std::time::Duration;

use xmk_core::fedavg::local_update;
use xmk_core::federation::{self, device_keygen, round_training, CryptoContext};
use xmk_core::mkhe::{self, Preset};
use xmk_core::seeds::{derive_rng, Purpose};
use xmk_core::{
    AggregatedPublicKey, DecryptionShare, Fingerprint, LocalDataset, ModelWeights, RingElement,
};

use crate::message::{AbortScope, Body, JoinRequest, ParamsAnnounce, RoundMessage};
use crate::transport::{Endpoint, Received};

pub const DEFAULT_DEVICE_TIMEOUT: Duration = Duration::from_secs(120);

/// Misbehaviour injected for protocol tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Never sends its update in the given round.
    SilentOnUpdate(u32),
    /// Sends its update but never its decryption share in the given round.
    SilentOnDecShare(u32),
    /// Resends the previous round's shares before the fresh ones.
    ReplayDecShare(u32),
    /// Sends an undecodable frame instead of its update.
    GarbledUpdate(u32),
}

#[derive(Debug, Clone)]
pub struct DeviceConfig {
    /// 0 lets the server pick.
    pub requested_id: u32,
    pub preset: Preset,
    /// Base seed for every key, noise and training stream of this device.
    pub seed: u64,
    pub data: LocalDataset,
    pub timeout: Duration,
    pub fault: Fault,
}

#[derive(Debug, thiserror::Error)]
pub enum DeviceError {
    #[error("timed out waiting for {0}")]
    Timeout(&'static str),
    #[error("connection closed while waiting for {0}")]
    Closed(&'static str),
    #[error("session aborted by server: {0}")]
    Aborted(String),
    #[error("parameter hash mismatch with the server")]
    ParamsMismatch,
    #[error("unexpected message: {0}")]
    Unexpected(String),
    #[error(transparent)]
    Crypto(#[from] xmk_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceReport {
    pub id: u32,
    pub params: ParamsAnnounce,
    pub apk_fingerprint: Fingerprint,
    pub global: ModelWeights,
    pub completed: Vec<u32>,
    pub failed: Vec<(u32, String)>,
    /// Merged fingerprint the server reported for each completed round.
    pub results: Vec<(u32, Fingerprint)>,
}

enum RoundEvent {
    Got(RoundMessage),
    Aborted(String),
}

struct Device {
    cfg: DeviceConfig,
    ep: Endpoint,
    id: u32,
}

impl Device {
    fn send(&mut self, round: u32, body: Body) -> Result<(), DeviceError> {
        self.ep.send(&RoundMessage::new(round, self.id, body))?;
        Ok(())
    }

    /// Waits for a message `want` accepts. A session abort is an error; a
    /// round abort for `round` is returned to the caller. Anything else is
    /// stale and skipped.
    fn wait(
        &mut self,
        what: &'static str,
        round: u32,
        want: impl Fn(&RoundMessage) -> bool,
    ) -> Result<RoundEvent, DeviceError> {
        loop {
            match self.ep.recv_timeout(self.cfg.timeout) {
                Received::Message(m) => {
                    if let Body::Abort { scope, reason, .. } = &m.body {
                        match scope {
                            AbortScope::Session => {
                                return Err(DeviceError::Aborted(reason.clone()))
                            }
                            AbortScope::Round if m.round_id == round && round > 0 => {
                                return Ok(RoundEvent::Aborted(reason.clone()))
                            }
                            AbortScope::Round => continue,
                        }
                    }
                    if want(&m) {
                        return Ok(RoundEvent::Got(m));
                    }
                }
                Received::Malformed(_) | Received::Oversize(_) => {}
                Received::Closed => return Err(DeviceError::Closed(what)),
                Received::Timeout => return Err(DeviceError::Timeout(what)),
            }
        }
    }

    fn wait_setup(
        &mut self,
        what: &'static str,
        want: impl Fn(&RoundMessage) -> bool,
    ) -> Result<Body, DeviceError> {
        match self.wait(what, 0, want)? {
            RoundEvent::Got(m) => Ok(m.body),
            RoundEvent::Aborted(r) => Err(DeviceError::Aborted(r)),
        }
    }
}

/// Runs a device to completion over `ep`.
pub fn run_device(cfg: DeviceConfig, ep: Endpoint) -> Result<DeviceReport, DeviceError> {
    let ctx = CryptoContext::new(cfg.preset)?;
    let params_hash = mkhe::params_hash(&ctx.ring, ctx.encoding());
    let mut dev = Device {
        id: cfg.requested_id,
        cfg,
        ep,
    };
    let result = session(&mut dev, &ctx, params_hash);
    dev.ep.close();
    result
}

fn session(
    dev: &mut Device,
    ctx: &CryptoContext,
    params_hash: Fingerprint,
) -> Result<DeviceReport, DeviceError> {
    dev.send(
        0,
        Body::JoinRequest(JoinRequest {
            requested_id: dev.cfg.requested_id,
            preset: dev.cfg.preset.name().to_string(),
            params_hash,
        }),
    )?;
    let Body::ParamsAnnounce(params) =
        dev.wait_setup("parameters", |m| matches!(m.body, Body::ParamsAnnounce(_)))?
    else {
        unreachable!()
    };
    if params.params_hash != params_hash || params.preset != dev.cfg.preset.name() {
        return Err(DeviceError::ParamsMismatch);
    }
    dev.id = params.device_id;
    let id = dev.id;
    let seed = dev.cfg.seed;

    let me = device_keygen(ctx, seed, id)?;
    dev.send(0, Body::PubKeyShare(me.pk.clone()))?;
    let Body::AggPkBroadcast(apk) = dev.wait_setup("aggregated key", |m| {
        matches!(m.body, Body::AggPkBroadcast(_))
    })?
    else {
        unreachable!()
    };
    if !apk.contributors.contains(&id) || apk.contributors.len() != params.device_count as usize {
        return Err(DeviceError::Unexpected(
            "aggregated key does not cover this session".into(),
        ));
    }
    let Body::GlobalModel(mut global) =
        dev.wait_setup("initial model", |m| matches!(m.body, Body::GlobalModel(_)))?
    else {
        unreachable!()
    };
    if global.layout != params.layout {
        return Err(DeviceError::Unexpected(
            "initial model has the wrong layout".into(),
        ));
    }

    let base_training = params.training.to_config();
    let mut report = DeviceReport {
        id,
        params: params.clone(),
        apk_fingerprint: apk.fingerprint(),
        global: global.clone(),
        completed: Vec::new(),
        failed: Vec::new(),
        results: Vec::new(),
    };
    let mut previous: Option<(u32, Vec<DecryptionShare>)> = None;
    for round in 1..=params.rounds {
        let outcome = run_round(
            dev,
            ctx,
            &apk,
            &me,
            &global,
            &base_training,
            round,
            &mut previous,
        )?;
        match outcome {
            Ok((weights, fp)) => {
                global = weights;
                report.completed.push(round);
                report.results.push((round, fp));
            }
            Err(reason) => report.failed.push((round, reason)),
        }
    }
    report.global = global;
    Ok(report)
}

type RoundResult = Result<(ModelWeights, Fingerprint), String>;

#[allow(clippy::too_many_arguments)]
fn run_round(
    dev: &mut Device,
    ctx: &CryptoContext,
    apk: &AggregatedPublicKey,
    me: &federation::Participant,
    global: &ModelWeights,
    base_training: &xmk_core::TrainingConfig,
    round: u32,
    previous: &mut Option<(u32, Vec<DecryptionShare>)>,
) -> Result<RoundResult, DeviceError> {
    let id = dev.id;
    let seed = dev.cfg.seed;
    let fault = dev.cfg.fault;

    // steps 1-2
    let training = round_training(base_training, seed, id, round);
    let local = local_update(global, &dev.cfg.data, &training)?;
    let mut rng = derive_rng(seed, id, Purpose::Encrypt, round);
    let update = federation::encrypt_weights(ctx, apk, &local.values, &mut rng)?;
    match fault {
        Fault::SilentOnUpdate(r) if r == round => {}
        Fault::GarbledUpdate(r) if r == round => {
            let mut bytes = RoundMessage::new(round, id, Body::EncryptedUpdate(update)).encode();
            let mid = bytes.len() / 2;
            bytes[mid] ^= 0x5a;
            dev.ep.send_raw(&bytes)?;
        }
        _ => dev.send(round, Body::EncryptedUpdate(update))?,
    }

    // steps 3-4
    let c_sum1: Vec<RingElement> = match dev.wait("summed ciphertext", round, |m| {
        m.round_id == round && matches!(m.body, Body::CSum1Broadcast(_))
    })? {
        RoundEvent::Aborted(reason) => return Ok(Err(reason)),
        RoundEvent::Got(RoundMessage {
            body: Body::CSum1Broadcast(sums),
            ..
        }) => {
            let key = apk.fingerprint();
            if sums.iter().any(|s| s.key_fingerprint != key) {
                return Err(DeviceError::Unexpected("sum under a different key".into()));
            }
            sums.into_iter().map(|s| s.c_sum1).collect()
        }
        RoundEvent::Got(_) => unreachable!(),
    };
    let mut rng = derive_rng(seed, id, Purpose::DecryptShare, round);
    let shares = federation::decryption_shares(ctx, &me.sk, apk, &c_sum1, &mut rng)?;
    if let (Fault::ReplayDecShare(r), Some((old_round, old))) = (fault, previous.as_ref()) {
        if r == round {
            dev.send(*old_round, Body::DecShare(old.clone()))?;
            dev.send(round, Body::DecShare(old.clone()))?;
        }
    }
    match fault {
        Fault::SilentOnDecShare(r) if r == round => {}
        _ => dev.send(round, Body::DecShare(shares.clone()))?,
    }
    *previous = Some((round, shares));

    // step 5
    match dev.wait("round result", round, |m| {
        m.round_id == round && matches!(m.body, Body::RoundResult { .. })
    })? {
        RoundEvent::Aborted(reason) => Ok(Err(reason)),
        RoundEvent::Got(RoundMessage {
            body:
                Body::RoundResult {
                    weights,
                    merged_fingerprint,
                },
            ..
        }) => Ok(Ok((weights, merged_fingerprint))),
        RoundEvent::Got(_) => unreachable!(),
    }
}
