//! Server side of the aggregation protocol.
//!
//! The server is a single-threaded state machine over the hub's event
//! queue. Setup registers `N` devices, announces the parameters, collects
//! the public key shares and broadcasts their aggregate plus the initial
//! model. Each round then collects one encrypted update per device,
//! broadcasts the summed `C_sum1`, collects one decryption share per device,
//! merges, and broadcasts the averaged weights. A round missing any update
//! or share when its phase times out is aborted and the global model kept.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::time::{Duration, Instant};

use xmk_core::federation::{self, initial_model, CryptoContext};
use xmk_core::mkhe::{self, Preset};
use xmk_core::{
    AggregatedPublicKey, Ciphertext, CiphertextSum, DecryptionShare, Fingerprint, LocalDataset,
    ModelLayout, ModelWeights, PublicKeyShare, RingElement,
};

use crate::message::{
    AbortScope, Body, JoinRequest, MessageKind, ParamsAnnounce, RoundMessage, TrainingParams,
    WireError, SERVER_ID,
};
use crate::transport::{ConnId, Event, Hub, Incoming, Link};

pub const DEFAULT_PHASE_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub devices: usize,
    pub preset: Preset,
    pub rounds: u32,
    pub training: TrainingParams,
    pub layout: ModelLayout,
    /// Seeds the initial global model.
    pub seed: u64,
    pub phase_timeout: Duration,
    /// Evaluated after every round when present.
    pub test_set: Option<LocalDataset>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServerPhase {
    Registration,
    KeySetup,
    /// Setup finished; waiting for the next round to start.
    Idle,
    /// Steps 1-2: devices train and send encrypted updates.
    AwaitingUpdates(u32),
    /// Steps 3-4: `C_sum1` broadcast, decryption shares coming back.
    AwaitingShares(u32),
    Done,
    Failed,
}

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("timed out waiting for {0}")]
    Timeout(String),
    #[error("round {round} aborted: {reason}")]
    RoundAborted {
        round: u32,
        reason: String,
        offender: Option<u32>,
    },
    #[error("session aborted: {reason}")]
    SessionAborted {
        reason: String,
        offender: Option<u32>,
    },
    #[error("operation not allowed in phase {0:?}")]
    WrongPhase(ServerPhase),
    #[error(transparent)]
    Crypto(#[from] xmk_core::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Inbound,
    Outbound,
}

/// One logical message seen by the server. A broadcast is logged once.
#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptEntry {
    pub direction: Direction,
    pub kind: MessageKind,
    pub round_id: u32,
    /// Sender for inbound entries, recipient for outbound ones, `None` for
    /// a broadcast or a connection that never registered.
    pub peer: Option<u32>,
    pub bytes: usize,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub round_id: u32,
    pub device: Option<u32>,
    pub kind: Option<MessageKind>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub round: u32,
    pub weights: ModelWeights,
    pub merged: Vec<RingElement>,
    pub merged_fingerprint: Fingerprint,
    pub accuracy: Option<f64>,
}

/// What the server saw in a round; kept for inspection.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoundRecord {
    pub round: u32,
    pub failure: Option<String>,
    pub accuracy: Option<f64>,
    /// Fingerprint of each broadcast `C_sum1` chunk.
    pub sum_fingerprints: Vec<Fingerprint>,
    /// Fingerprint each device's individual `c1` chunks would carry.
    pub individual_c1: BTreeMap<u32, Vec<Fingerprint>>,
    /// The sum each accepted share was bound to.
    pub share_bindings: BTreeMap<u32, Vec<Fingerprint>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionReport {
    pub apk_fingerprint: Fingerprint,
    pub rounds: Vec<RoundRecord>,
    pub outcomes: Vec<RoundOutcome>,
}

struct Conn {
    link: Box<dyn Link>,
    device: Option<u32>,
}

enum Step {
    Message {
        device: u32,
        msg: RoundMessage,
        bytes: usize,
    },
    Malformed {
        device: u32,
        error: WireError,
    },
    /// A device registered.
    Joined,
    /// The session cannot continue.
    Fatal(ProtocolError),
    Timeout,
}

pub struct Server {
    cfg: ServerConfig,
    ctx: CryptoContext,
    params_hash: Fingerprint,
    hub: Hub,
    phase: ServerPhase,
    conns: HashMap<ConnId, Conn>,
    registry: BTreeMap<u32, ConnId>,
    pk_shares: BTreeMap<u32, PublicKeyShare>,
    apk: Option<AggregatedPublicKey>,
    global: ModelWeights,
    last_round: u32,
    updates: BTreeMap<u32, Vec<Ciphertext>>,
    sums: Vec<CiphertextSum>,
    shares: BTreeMap<u32, Vec<DecryptionShare>>,
    pending: VecDeque<Step>,
    deferred: Vec<Step>,
    transcript: Vec<TranscriptEntry>,
    rejections: Vec<Rejection>,
    records: Vec<RoundRecord>,
}

impl fmt::Debug for Server {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Server")
            .field("phase", &self.phase)
            .field("registered", &self.registry.keys().collect::<Vec<_>>())
            .field("last_round", &self.last_round)
            .finish()
    }
}

/// Hash of the merged plaintext chunks of one round.
pub fn merged_fingerprint(merged: &[RingElement]) -> Fingerprint {
    let mut bytes = Vec::new();
    for m in merged {
        m.write_bytes(&mut bytes);
    }
    Fingerprint::of_bytes(b"xmk/merged", &bytes)
}

impl Server {
    pub fn new(cfg: ServerConfig, hub: Hub) -> Result<Self, ProtocolError> {
        if cfg.devices < 2 {
            return Err(xmk_core::Error::TooFewKeyShares {
                min: 2,
                got: cfg.devices,
            }
            .into());
        }
        let ctx = CryptoContext::new(cfg.preset)?;
        let params_hash = mkhe::params_hash(&ctx.ring, ctx.encoding());
        let global = initial_model(cfg.layout, cfg.seed);
        Ok(Self {
            cfg,
            ctx,
            params_hash,
            hub,
            phase: ServerPhase::Registration,
            conns: HashMap::new(),
            registry: BTreeMap::new(),
            pk_shares: BTreeMap::new(),
            apk: None,
            global,
            last_round: 0,
            updates: BTreeMap::new(),
            sums: Vec::new(),
            shares: BTreeMap::new(),
            pending: VecDeque::new(),
            deferred: Vec::new(),
            transcript: Vec::new(),
            rejections: Vec::new(),
            records: Vec::new(),
        })
    }

    pub fn phase(&self) -> ServerPhase {
        self.phase
    }

    pub fn params_hash(&self) -> Fingerprint {
        self.params_hash
    }

    pub fn context(&self) -> &CryptoContext {
        &self.ctx
    }

    pub fn apk(&self) -> Option<&AggregatedPublicKey> {
        self.apk.as_ref()
    }

    pub fn global(&self) -> &ModelWeights {
        &self.global
    }

    pub fn registered(&self) -> Vec<u32> {
        self.registry.keys().copied().collect()
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    pub fn rejections(&self) -> &[Rejection] {
        &self.rejections
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.records
    }

    /// Setup followed by every configured round. Aborted rounds are recorded
    /// and the session carries on with the unchanged model.
    pub fn run(&mut self) -> Result<SessionReport, ProtocolError> {
        let apk_fingerprint = self.run_setup()?;
        let mut outcomes = Vec::new();
        for round in 1..=self.cfg.rounds {
            match self.run_round(round) {
                Ok(o) => outcomes.push(o),
                Err(ProtocolError::RoundAborted { .. }) => {}
                Err(e) => {
                    self.phase = ServerPhase::Failed;
                    return Err(e);
                }
            }
        }
        self.phase = ServerPhase::Done;
        self.close_all();
        Ok(SessionReport {
            apk_fingerprint,
            rounds: self.records.clone(),
            outcomes,
        })
    }

    /// Registers exactly `N` devices and distributes the aggregated key and
    /// the initial model. Returns the aggregated key's fingerprint.
    pub fn run_setup(&mut self) -> Result<Fingerprint, ProtocolError> {
        if self.phase != ServerPhase::Registration {
            return Err(ProtocolError::WrongPhase(self.phase));
        }
        let result = self.setup_inner();
        if result.is_err() {
            self.phase = ServerPhase::Failed;
        }
        result
    }

    fn setup_inner(&mut self) -> Result<Fingerprint, ProtocolError> {
        let deadline = Instant::now() + self.cfg.phase_timeout;
        while self.registry.len() < self.cfg.devices {
            match self.next_step(deadline) {
                Step::Timeout => {
                    return Err(ProtocolError::Timeout(format!(
                        "registrations ({} of {})",
                        self.registry.len(),
                        self.cfg.devices
                    )))
                }
                Step::Fatal(e) => return Err(e),
                Step::Joined => {}
                step @ Step::Message { .. } if is_kind(&step, MessageKind::PubKeyShare) => {
                    self.deferred.push(step)
                }
                step => self.reject_step(step, "unexpected during registration"),
            }
        }

        self.phase = ServerPhase::KeySetup;
        self.restore_deferred();
        let deadline = Instant::now() + self.cfg.phase_timeout;
        while self.pk_shares.len() < self.cfg.devices {
            match self.next_step(deadline) {
                Step::Timeout => {
                    let missing = self.missing(|id| self.pk_shares.contains_key(&id));
                    let reason = format!("missing public key shares from devices {missing:?}");
                    self.broadcast_abort(AbortScope::Session, None, 0, &reason);
                    return Err(ProtocolError::SessionAborted {
                        reason,
                        offender: None,
                    });
                }
                Step::Fatal(e) => return Err(e),
                Step::Joined => {}
                Step::Message { device, msg, bytes } => match msg.body {
                    Body::PubKeyShare(share)
                        if share.device_id == device
                            && !self.pk_shares.contains_key(&device)
                            && self.ctx.ring.check(&share.b).is_ok() =>
                    {
                        self.log_in(MessageKind::PubKeyShare, 0, Some(device), bytes, true);
                        self.pk_shares.insert(device, share);
                    }
                    Body::EncryptedUpdate(_) => {
                        self.deferred.push(Step::Message { device, msg, bytes })
                    }
                    _ => self.reject_step(
                        Step::Message { device, msg, bytes },
                        "unexpected during key setup",
                    ),
                },
                Step::Malformed { device, error } => {
                    let reason = format!("malformed message from device {device}: {error}");
                    self.broadcast_abort(AbortScope::Session, Some(device), 0, &reason);
                    return Err(ProtocolError::SessionAborted {
                        reason,
                        offender: Some(device),
                    });
                }
            }
        }
        let shares: Vec<PublicKeyShare> = self.pk_shares.values().cloned().collect();
        let apk = mkhe::aggregate_public_keys(&self.ctx.ring, &shares)?;
        let fp = apk.fingerprint();
        self.broadcast(0, Body::AggPkBroadcast(apk.clone()));
        self.apk = Some(apk);
        self.broadcast(0, Body::GlobalModel(self.global.clone()));
        self.phase = ServerPhase::Idle;
        Ok(fp)
    }

    /// Runs steps 1-5 for `round`, which must exceed every earlier round id.
    pub fn run_round(&mut self, round: u32) -> Result<RoundOutcome, ProtocolError> {
        if self.phase != ServerPhase::Idle || round <= self.last_round {
            return Err(ProtocolError::WrongPhase(self.phase));
        }
        self.last_round = round;
        self.records.push(RoundRecord {
            round,
            ..RoundRecord::default()
        });
        let result = self.round_inner(round);
        self.updates.clear();
        self.shares.clear();
        self.sums.clear();
        match &result {
            Ok(o) => self.record().accuracy = o.accuracy,
            Err(e) => self.record().failure = Some(e.to_string()),
        }
        if self.phase != ServerPhase::Failed {
            self.phase = ServerPhase::Idle;
        }
        result
    }

    fn record(&mut self) -> &mut RoundRecord {
        self.records.last_mut().expect("a round is in progress")
    }

    fn round_inner(&mut self, round: u32) -> Result<RoundOutcome, ProtocolError> {
        let apk = self
            .apk
            .clone()
            .ok_or(ProtocolError::WrongPhase(self.phase))?;
        let chunks = self.ctx.chunks_for(self.cfg.layout.param_count());

        // steps 1-2
        self.phase = ServerPhase::AwaitingUpdates(round);
        self.restore_deferred();
        let deadline = Instant::now() + self.cfg.phase_timeout;
        while self.updates.len() < self.cfg.devices {
            match self.next_step(deadline) {
                Step::Timeout => {
                    let missing = self.missing(|id| self.updates.contains_key(&id));
                    return Err(self.abort_round(
                        round,
                        None,
                        format!("missing encrypted updates from devices {missing:?}"),
                    ));
                }
                Step::Fatal(e) => return Err(e),
                Step::Joined => {}
                Step::Malformed { device, error } => {
                    return Err(self.abort_round(
                        round,
                        Some(device),
                        format!("malformed message from device {device}: {error}"),
                    ))
                }
                Step::Message { device, msg, bytes } => {
                    if msg.round_id > round {
                        self.deferred.push(Step::Message { device, msg, bytes });
                        continue;
                    }
                    let verdict = match &msg.body {
                        Body::EncryptedUpdate(cts) => {
                            self.check_update(round, device, msg.round_id, cts, chunks, &apk)
                        }
                        _ => Err(format!(
                            "{} not expected while collecting updates",
                            msg.kind()
                        )),
                    };
                    match (verdict, msg.body) {
                        (Ok(()), Body::EncryptedUpdate(cts)) => {
                            self.log_in(
                                MessageKind::EncryptedUpdate,
                                round,
                                Some(device),
                                bytes,
                                true,
                            );
                            let c1: Vec<Fingerprint> =
                                cts.iter().map(|c| mkhe::sum_fingerprint(&c.c1)).collect();
                            self.record().individual_c1.insert(device, c1);
                            self.updates.insert(device, cts);
                        }
                        (Err(reason), body) => {
                            let kind = body.kind();
                            self.reject(msg.round_id, Some(device), Some(kind), bytes, reason)
                        }
                        (Ok(()), _) => unreachable!("only updates pass the check"),
                    }
                }
            }
        }

        // step 3
        let ordered: Vec<Vec<Ciphertext>> = self.updates.values().cloned().collect();
        self.sums = federation::sum_updates(&self.ctx, &ordered)?;
        let broadcast = self.sums.iter().map(|s| s.broadcast()).collect();
        let sum_fps: Vec<Fingerprint> = self.sums.iter().map(|s| s.sum_fingerprint()).collect();
        self.record().sum_fingerprints = sum_fps.clone();
        self.broadcast(round, Body::CSum1Broadcast(broadcast));

        // step 4
        self.phase = ServerPhase::AwaitingShares(round);
        let deadline = Instant::now() + self.cfg.phase_timeout;
        while self.shares.len() < self.cfg.devices {
            match self.next_step(deadline) {
                Step::Timeout => {
                    let per_device: Vec<Vec<DecryptionShare>> =
                        self.shares.values().cloned().collect();
                    let reason =
                        match federation::merge_updates(&self.ctx, &apk, &self.sums, &per_device) {
                            Err(e) => e.to_string(),
                            Ok(_) => "decryption shares incomplete".to_string(),
                        };
                    return Err(self.abort_round(round, None, reason));
                }
                Step::Fatal(e) => return Err(e),
                Step::Joined => {}
                Step::Malformed { device, error } => {
                    return Err(self.abort_round(
                        round,
                        Some(device),
                        format!("malformed message from device {device}: {error}"),
                    ))
                }
                Step::Message { device, msg, bytes } => {
                    if msg.round_id > round {
                        self.deferred.push(Step::Message { device, msg, bytes });
                        continue;
                    }
                    let verdict = match &msg.body {
                        Body::DecShare(shares) => {
                            self.check_shares(round, device, msg.round_id, shares, &sum_fps)
                        }
                        _ => Err(format!(
                            "{} not expected while collecting shares",
                            msg.kind()
                        )),
                    };
                    match (verdict, msg.body) {
                        (Ok(()), Body::DecShare(shares)) => {
                            self.log_in(MessageKind::DecShare, round, Some(device), bytes, true);
                            let bound = shares.iter().map(|s| s.sum_fingerprint).collect();
                            self.record().share_bindings.insert(device, bound);
                            self.shares.insert(device, shares);
                        }
                        (Err(reason), body) => {
                            let kind = body.kind();
                            self.reject(msg.round_id, Some(device), Some(kind), bytes, reason)
                        }
                        (Ok(()), _) => unreachable!("only shares pass the check"),
                    }
                }
            }
        }

        // step 5
        let per_device: Vec<Vec<DecryptionShare>> = self.shares.values().cloned().collect();
        let merged = federation::merge_updates(&self.ctx, &apk, &self.sums, &per_device)?;
        let weights =
            federation::merged_average(&self.ctx, &merged, self.cfg.devices, self.cfg.layout)?;
        let merged_fp = merged_fingerprint(&merged);
        self.global = weights.clone();
        self.broadcast(
            round,
            Body::RoundResult {
                weights: weights.clone(),
                merged_fingerprint: merged_fp,
            },
        );
        let accuracy = match &self.cfg.test_set {
            Some(test) => Some(xmk_core::fedavg::evaluate(&weights, test)?),
            None => None,
        };
        Ok(RoundOutcome {
            round,
            weights,
            merged,
            merged_fingerprint: merged_fp,
            accuracy,
        })
    }

    fn check_update(
        &self,
        round: u32,
        device: u32,
        msg_round: u32,
        cts: &[Ciphertext],
        chunks: usize,
        apk: &AggregatedPublicKey,
    ) -> Result<(), String> {
        if msg_round < round {
            return Err(format!("stale update for round {msg_round}"));
        }
        if self.updates.contains_key(&device) {
            return Err("duplicate update".into());
        }
        if cts.len() != chunks {
            return Err(format!(
                "expected {chunks} ciphertext chunks, got {}",
                cts.len()
            ));
        }
        let key = apk.fingerprint();
        for ct in cts {
            if ct.key_fingerprint != key {
                return Err("ciphertext not under the aggregated key".into());
            }
            if self.ctx.ring.check(&ct.c0).is_err() || self.ctx.ring.check(&ct.c1).is_err() {
                return Err("ciphertext parameters do not match".into());
            }
        }
        Ok(())
    }

    fn check_shares(
        &self,
        round: u32,
        device: u32,
        msg_round: u32,
        shares: &[DecryptionShare],
        sum_fps: &[Fingerprint],
    ) -> Result<(), String> {
        if msg_round < round {
            return Err(format!("stale decryption share for round {msg_round}"));
        }
        if self.shares.contains_key(&device) {
            return Err("duplicate decryption share".into());
        }
        if shares.len() != sum_fps.len() {
            return Err(format!(
                "expected {} share chunks, got {}",
                sum_fps.len(),
                shares.len()
            ));
        }
        for (share, fp) in shares.iter().zip(sum_fps) {
            if share.device_id != device {
                return Err("share names another device".into());
            }
            if share.sum_fingerprint != *fp {
                return Err("share bound to a different sum".into());
            }
            if self.ctx.ring.check(&share.d).is_err() {
                return Err("share parameters do not match".into());
            }
        }
        Ok(())
    }

    fn abort_round(&mut self, round: u32, offender: Option<u32>, reason: String) -> ProtocolError {
        self.broadcast_abort(AbortScope::Round, offender, round, &reason);
        ProtocolError::RoundAborted {
            round,
            reason,
            offender,
        }
    }

    fn missing(&self, have: impl Fn(u32) -> bool) -> Vec<u32> {
        self.registry
            .keys()
            .copied()
            .filter(|&id| !have(id))
            .collect()
    }

    fn restore_deferred(&mut self) {
        for step in self.deferred.drain(..).rev() {
            self.pending.push_front(step);
        }
    }

    /// Next protocol-level step. Connection bookkeeping, joins and anything
    /// from unregistered or impersonating peers are handled here.
    fn next_step(&mut self, deadline: Instant) -> Step {
        if let Some(step) = self.pending.pop_front() {
            return step;
        }
        loop {
            let now = Instant::now();
            if now >= deadline {
                return Step::Timeout;
            }
            let Some(event) = self.hub.recv_timeout(deadline - now) else {
                return Step::Timeout;
            };
            match event {
                Event::Opened { conn, link } => {
                    self.conns.insert(conn, Conn { link, device: None });
                }
                Event::Closed { conn } => {
                    if let Some(mut c) = self.conns.remove(&conn) {
                        c.link.close();
                    }
                }
                Event::Frame { conn, frame, bytes } => {
                    let device = self.conns.get(&conn).and_then(|c| c.device);
                    match frame {
                        Incoming::Oversize(len) => self.reject(
                            0,
                            device,
                            None,
                            bytes,
                            format!("oversized frame of {len} bytes dropped"),
                        ),
                        Incoming::Malformed(error) => match device {
                            Some(device) => return Step::Malformed { device, error },
                            None => {
                                let reason = format!("malformed message: {error}");
                                self.send_abort_to(conn, AbortScope::Session, &reason);
                                self.reject(0, None, None, bytes, reason);
                            }
                        },
                        Incoming::Message(msg) => match device {
                            None => match self.handle_unregistered(conn, msg, bytes) {
                                Some(Err(fatal)) => return Step::Fatal(fatal),
                                Some(Ok(())) => return Step::Joined,
                                None => {}
                            },
                            Some(device) if msg.sender_id != device => self.reject(
                                msg.round_id,
                                Some(device),
                                Some(msg.kind()),
                                bytes,
                                format!("sender id {} does not match connection", msg.sender_id),
                            ),
                            Some(device) => return Step::Message { device, msg, bytes },
                        },
                    }
                }
            }
        }
    }

    fn handle_unregistered(
        &mut self,
        conn: ConnId,
        msg: RoundMessage,
        bytes: usize,
    ) -> Option<Result<(), ProtocolError>> {
        let kind = msg.kind();
        let Body::JoinRequest(join) = msg.body else {
            self.reject(
                msg.round_id,
                None,
                Some(kind),
                bytes,
                "peer has not joined".into(),
            );
            return None;
        };
        if self.phase != ServerPhase::Registration {
            self.log_in(kind, 0, None, bytes, false);
            self.send_abort_to(conn, AbortScope::Session, "registration closed");
            self.reject(0, None, Some(kind), 0, "registration closed".into());
            return None;
        }
        if join.params_hash != self.params_hash || join.preset != self.cfg.preset.name() {
            self.log_in(kind, 0, None, bytes, false);
            let offender = (join.requested_id != 0).then_some(join.requested_id);
            let reason = format!(
                "parameter hash mismatch (device uses preset {:?})",
                join.preset
            );
            self.send_abort_to(conn, AbortScope::Session, &reason);
            self.broadcast_abort(AbortScope::Session, offender, 0, &reason);
            self.reject(0, offender, Some(kind), 0, reason.clone());
            return Some(Err(ProtocolError::SessionAborted { reason, offender }));
        }
        let id = match self.assign_id(&join) {
            Ok(id) => id,
            Err(reason) => {
                self.log_in(kind, 0, None, bytes, false);
                self.send_abort_to(conn, AbortScope::Session, &reason);
                self.reject(0, None, Some(kind), 0, reason);
                return None;
            }
        };
        self.log_in(kind, 0, Some(id), bytes, true);
        self.registry.insert(id, conn);
        if let Some(c) = self.conns.get_mut(&conn) {
            c.device = Some(id);
        }
        let announce = ParamsAnnounce {
            device_id: id,
            device_count: self.cfg.devices as u32,
            rounds: self.cfg.rounds,
            preset: self.cfg.preset.name().to_string(),
            params_hash: self.params_hash,
            training: self.cfg.training,
            layout: self.cfg.layout,
        };
        self.send_to(id, 0, Body::ParamsAnnounce(announce));
        Some(Ok(()))
    }

    fn assign_id(&self, join: &JoinRequest) -> Result<u32, String> {
        match join.requested_id {
            0 => Ok((1..).find(|id| !self.registry.contains_key(id)).unwrap()),
            id if self.registry.contains_key(&id) => Err(format!("duplicate device id {id}")),
            id => Ok(id),
        }
    }

    fn log_in(
        &mut self,
        kind: MessageKind,
        round_id: u32,
        peer: Option<u32>,
        bytes: usize,
        accepted: bool,
    ) {
        self.transcript.push(TranscriptEntry {
            direction: Direction::Inbound,
            kind,
            round_id,
            peer,
            bytes,
            accepted,
        });
    }

    fn reject_step(&mut self, step: Step, why: &str) {
        match step {
            Step::Message { device, msg, bytes } => self.reject(
                msg.round_id,
                Some(device),
                Some(msg.kind()),
                bytes,
                why.to_string(),
            ),
            Step::Malformed { device, error } => {
                self.reject(0, Some(device), None, 0, format!("malformed: {error}"))
            }
            Step::Timeout | Step::Joined | Step::Fatal(_) => {}
        }
    }

    fn reject(
        &mut self,
        round_id: u32,
        device: Option<u32>,
        kind: Option<MessageKind>,
        bytes: usize,
        reason: String,
    ) {
        if let (Some(kind), true) = (kind, bytes > 0) {
            self.log_in(kind, round_id, device, bytes, false);
        }
        self.rejections.push(Rejection {
            round_id,
            device,
            kind,
            reason,
        });
    }

    fn write(&mut self, conn: ConnId, msg: &RoundMessage) -> Option<usize> {
        let max = self.hub.max_frame();
        let c = self.conns.get_mut(&conn)?;
        crate::framing::write_message(&mut c.link, msg, max).ok()
    }

    fn send_to(&mut self, device: u32, round_id: u32, body: Body) {
        let kind = body.kind();
        let msg = RoundMessage::new(round_id, SERVER_ID, body);
        let bytes = self
            .registry
            .get(&device)
            .copied()
            .and_then(|conn| self.write(conn, &msg))
            .unwrap_or(0);
        self.transcript.push(TranscriptEntry {
            direction: Direction::Outbound,
            kind,
            round_id,
            peer: Some(device),
            bytes,
            accepted: true,
        });
    }

    fn send_abort_to(&mut self, conn: ConnId, scope: AbortScope, reason: &str) {
        let msg = RoundMessage::new(
            0,
            SERVER_ID,
            Body::Abort {
                scope,
                offender: SERVER_ID,
                reason: reason.to_string(),
            },
        );
        let bytes = self.write(conn, &msg).unwrap_or(0);
        self.transcript.push(TranscriptEntry {
            direction: Direction::Outbound,
            kind: MessageKind::Abort,
            round_id: 0,
            peer: None,
            bytes,
            accepted: true,
        });
    }

    /// Sends one message to every registered device; logged once.
    fn broadcast(&mut self, round_id: u32, body: Body) {
        let kind = body.kind();
        let msg = RoundMessage::new(round_id, SERVER_ID, body);
        let conns: Vec<ConnId> = self.registry.values().copied().collect();
        let mut bytes = 0;
        for conn in conns {
            bytes = self.write(conn, &msg).unwrap_or(bytes);
        }
        self.transcript.push(TranscriptEntry {
            direction: Direction::Outbound,
            kind,
            round_id,
            peer: None,
            bytes,
            accepted: true,
        });
    }

    fn broadcast_abort(
        &mut self,
        scope: AbortScope,
        offender: Option<u32>,
        round: u32,
        reason: &str,
    ) {
        self.broadcast(
            round,
            Body::Abort {
                scope,
                offender: offender.unwrap_or(SERVER_ID),
                reason: reason.to_string(),
            },
        );
    }

    fn close_all(&mut self) {
        for c in self.conns.values_mut() {
            c.link.close();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.close_all();
    }
}

fn is_kind(step: &Step, kind: MessageKind) -> bool {
    matches!(step, Step::Message { msg, .. } if msg.kind() == kind)
}
