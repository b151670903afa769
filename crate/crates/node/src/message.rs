//! Round messages and their byte layout.
//!
//! `kind: u8 | round_id: u32 | sender_id: u32 | payload_len: u32 | payload | crc32: u32`,
//! integers big-endian, CRC32 over everything before it. Payload fields of
//! our own are big-endian too; embedded keys, ciphertexts and shares keep
//! the object encoding from `xmk_core::wire`.

use std::fmt;

use xmk_core::wire::WireObject;
use xmk_core::{
    AggregatedPublicKey, Ciphertext, DecryptionShare, Fingerprint, ModelLayout, ModelWeights,
    Optimizer, PublicKeyShare, SumBroadcast, TrainingConfig,
};

/// Sender id the server uses; devices are numbered from 1.
pub const SERVER_ID: u32 = 0;

/// Bytes a message adds around its payload.
pub const MESSAGE_OVERHEAD: usize = 1 + 4 + 4 + 4 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum MessageKind {
    JoinRequest = 1,
    ParamsAnnounce = 2,
    PubKeyShare = 3,
    AggPkBroadcast = 4,
    GlobalModel = 5,
    EncryptedUpdate = 6,
    CSum1Broadcast = 7,
    DecShare = 8,
    RoundResult = 9,
    Abort = 10,
}

impl MessageKind {
    pub const ALL: [MessageKind; 10] = [
        MessageKind::JoinRequest,
        MessageKind::ParamsAnnounce,
        MessageKind::PubKeyShare,
        MessageKind::AggPkBroadcast,
        MessageKind::GlobalModel,
        MessageKind::EncryptedUpdate,
        MessageKind::CSum1Broadcast,
        MessageKind::DecShare,
        MessageKind::RoundResult,
        MessageKind::Abort,
    ];

    pub fn from_u8(b: u8) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| *k as u8 == b)
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum WireError {
    #[error("message truncated")]
    Truncated,
    #[error("checksum mismatch: frame says {stated:#010x}, computed {computed:#010x}")]
    BadChecksum { stated: u32, computed: u32 },
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("payload length field {stated} does not match {actual} bytes present")]
    PayloadLength { stated: usize, actual: usize },
    #[error("{0} trailing bytes after payload")]
    Trailing(usize),
    #[error("invalid text field")]
    BadString,
    #[error("invalid field: {0}")]
    BadField(&'static str),
    #[error("embedded object: {0}")]
    Object(#[from] xmk_core::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum AbortScope {
    /// The whole session ends.
    Session = 0,
    /// Only the named round failed; the global model is unchanged.
    Round = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JoinRequest {
    /// 0 asks the server to assign an id.
    pub requested_id: u32,
    pub preset: String,
    pub params_hash: Fingerprint,
}

/// Hyper-parameters every device trains with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingParams {
    pub learning_rate: f64,
    pub batch_size: u32,
    pub local_epochs: u32,
    pub optimizer: Optimizer,
}

impl TrainingParams {
    pub fn from_config(cfg: &TrainingConfig) -> Self {
        Self {
            learning_rate: cfg.learning_rate,
            batch_size: cfg.batch_size as u32,
            local_epochs: cfg.local_epochs as u32,
            optimizer: cfg.optimizer,
        }
    }

    /// Training configuration with a zero seed; per-round seeds are derived
    /// by `federation::round_training`.
    pub fn to_config(&self) -> TrainingConfig {
        TrainingConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size as usize,
            local_epochs: self.local_epochs as usize,
            optimizer: self.optimizer,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamsAnnounce {
    pub device_id: u32,
    pub device_count: u32,
    pub rounds: u32,
    pub preset: String,
    pub params_hash: Fingerprint,
    pub training: TrainingParams,
    pub layout: ModelLayout,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    JoinRequest(JoinRequest),
    ParamsAnnounce(ParamsAnnounce),
    PubKeyShare(PublicKeyShare),
    AggPkBroadcast(AggregatedPublicKey),
    GlobalModel(ModelWeights),
    EncryptedUpdate(Vec<Ciphertext>),
    CSum1Broadcast(Vec<SumBroadcast>),
    DecShare(Vec<DecryptionShare>),
    RoundResult {
        weights: ModelWeights,
        /// Hash of the merged plaintext chunks the weights were decoded from.
        merged_fingerprint: Fingerprint,
    },
    Abort {
        scope: AbortScope,
        /// Device blamed for the abort, or `SERVER_ID`.
        offender: u32,
        reason: String,
    },
}

impl Body {
    pub fn kind(&self) -> MessageKind {
        match self {
            Body::JoinRequest(_) => MessageKind::JoinRequest,
            Body::ParamsAnnounce(_) => MessageKind::ParamsAnnounce,
            Body::PubKeyShare(_) => MessageKind::PubKeyShare,
            Body::AggPkBroadcast(_) => MessageKind::AggPkBroadcast,
            Body::GlobalModel(_) => MessageKind::GlobalModel,
            Body::EncryptedUpdate(_) => MessageKind::EncryptedUpdate,
            Body::CSum1Broadcast(_) => MessageKind::CSum1Broadcast,
            Body::DecShare(_) => MessageKind::DecShare,
            Body::RoundResult { .. } => MessageKind::RoundResult,
            Body::Abort { .. } => MessageKind::Abort,
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            Body::JoinRequest(j) => {
                put_u32(out, j.requested_id);
                put_str(out, &j.preset);
                out.extend_from_slice(j.params_hash.as_bytes());
            }
            Body::ParamsAnnounce(p) => {
                put_u32(out, p.device_id);
                put_u32(out, p.device_count);
                put_u32(out, p.rounds);
                put_str(out, &p.preset);
                out.extend_from_slice(p.params_hash.as_bytes());
                out.extend_from_slice(&p.training.learning_rate.to_be_bytes());
                put_u32(out, p.training.batch_size);
                put_u32(out, p.training.local_epochs);
                out.push(match p.training.optimizer {
                    Optimizer::Sgd => 0,
                    Optimizer::Adam => 1,
                });
                put_layout(out, p.layout);
            }
            Body::PubKeyShare(k) => k.write_to(out),
            Body::AggPkBroadcast(k) => k.write_to(out),
            Body::GlobalModel(w) => put_weights(out, w),
            Body::EncryptedUpdate(cts) => put_objects(out, cts),
            Body::CSum1Broadcast(sums) => put_objects(out, sums),
            Body::DecShare(shares) => put_objects(out, shares),
            Body::RoundResult {
                weights,
                merged_fingerprint,
            } => {
                put_weights(out, weights);
                out.extend_from_slice(merged_fingerprint.as_bytes());
            }
            Body::Abort {
                scope,
                offender,
                reason,
            } => {
                out.push(*scope as u8);
                put_u32(out, *offender);
                put_str(out, reason);
            }
        }
    }

    fn read(kind: MessageKind, payload: &[u8]) -> Result<Self, WireError> {
        let mut r = Cursor::new(payload);
        let body = match kind {
            MessageKind::JoinRequest => Body::JoinRequest(JoinRequest {
                requested_id: r.u32()?,
                preset: r.string()?,
                params_hash: r.fingerprint()?,
            }),
            MessageKind::ParamsAnnounce => Body::ParamsAnnounce(ParamsAnnounce {
                device_id: r.u32()?,
                device_count: r.u32()?,
                rounds: r.u32()?,
                preset: r.string()?,
                params_hash: r.fingerprint()?,
                training: TrainingParams {
                    learning_rate: r.f64()?,
                    batch_size: r.u32()?,
                    local_epochs: r.u32()?,
                    optimizer: match r.u8()? {
                        0 => Optimizer::Sgd,
                        1 => Optimizer::Adam,
                        _ => return Err(WireError::BadField("optimizer")),
                    },
                },
                layout: r.layout()?,
            }),
            MessageKind::PubKeyShare => Body::PubKeyShare(r.object()?),
            MessageKind::AggPkBroadcast => Body::AggPkBroadcast(r.object()?),
            MessageKind::GlobalModel => Body::GlobalModel(r.weights()?),
            MessageKind::EncryptedUpdate => Body::EncryptedUpdate(r.objects()?),
            MessageKind::CSum1Broadcast => Body::CSum1Broadcast(r.objects()?),
            MessageKind::DecShare => Body::DecShare(r.objects()?),
            MessageKind::RoundResult => Body::RoundResult {
                weights: r.weights()?,
                merged_fingerprint: r.fingerprint()?,
            },
            MessageKind::Abort => Body::Abort {
                scope: match r.u8()? {
                    0 => AbortScope::Session,
                    1 => AbortScope::Round,
                    _ => return Err(WireError::BadField("abort scope")),
                },
                offender: r.u32()?,
                reason: r.string()?,
            },
        };
        if !r.rest().is_empty() {
            return Err(WireError::Trailing(r.rest().len()));
        }
        Ok(body)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMessage {
    pub round_id: u32,
    pub sender_id: u32,
    pub body: Body,
}

impl RoundMessage {
    pub fn new(round_id: u32, sender_id: u32, body: Body) -> Self {
        Self {
            round_id,
            sender_id,
            body,
        }
    }

    pub fn kind(&self) -> MessageKind {
        self.body.kind()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        self.body.write(&mut payload);
        let mut out = Vec::with_capacity(MESSAGE_OVERHEAD + payload.len());
        out.push(self.kind() as u8);
        put_u32(&mut out, self.round_id);
        put_u32(&mut out, self.sender_id);
        put_u32(&mut out, payload.len() as u32);
        out.extend_from_slice(&payload);
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    /// Parses one message; the checksum is verified before anything else.
    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        if bytes.len() < MESSAGE_OVERHEAD {
            return Err(WireError::Truncated);
        }
        let (body_bytes, crc_bytes) = bytes.split_at(bytes.len() - 4);
        let stated = u32::from_be_bytes(crc_bytes.try_into().unwrap());
        let computed = crc32fast::hash(body_bytes);
        if stated != computed {
            return Err(WireError::BadChecksum { stated, computed });
        }
        let kind = MessageKind::from_u8(bytes[0]).ok_or(WireError::UnknownKind(bytes[0]))?;
        let round_id = u32::from_be_bytes(bytes[1..5].try_into().unwrap());
        let sender_id = u32::from_be_bytes(bytes[5..9].try_into().unwrap());
        let stated_len = u32::from_be_bytes(bytes[9..13].try_into().unwrap()) as usize;
        let payload = &body_bytes[13..];
        if stated_len != payload.len() {
            return Err(WireError::PayloadLength {
                stated: stated_len,
                actual: payload.len(),
            });
        }
        Ok(Self {
            round_id,
            sender_id,
            body: Body::read(kind, payload)?,
        })
    }
}

/// Encoded size of a `GlobalModel` / `RoundResult` weight block.
pub fn weights_len(count: usize) -> usize {
    3 * 4 + 4 + 8 * count
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    let bytes = s.as_bytes();
    let len = bytes.len().min(u16::MAX as usize);
    out.extend_from_slice(&(len as u16).to_be_bytes());
    out.extend_from_slice(&bytes[..len]);
}

fn put_layout(out: &mut Vec<u8>, l: ModelLayout) {
    put_u32(out, l.input as u32);
    put_u32(out, l.hidden as u32);
    put_u32(out, l.output as u32);
}

fn put_weights(out: &mut Vec<u8>, w: &ModelWeights) {
    put_layout(out, w.layout);
    put_u32(out, w.values.len() as u32);
    for v in &w.values {
        out.extend_from_slice(&v.to_be_bytes());
    }
}

fn put_objects<T: WireObject>(out: &mut Vec<u8>, items: &[T]) {
    put_u32(out, items.len() as u32);
    for item in items {
        item.write_to(out);
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.pos.checked_add(n).ok_or(WireError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(WireError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn skip(&mut self, n: usize) -> Result<(), WireError> {
        self.take(n).map(|_| ())
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, WireError> {
        let len = u16::from_be_bytes(self.take(2)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| WireError::BadString)
    }

    fn fingerprint(&mut self) -> Result<Fingerprint, WireError> {
        Ok(Fingerprint(self.take(32)?.try_into().unwrap()))
    }

    fn layout(&mut self) -> Result<ModelLayout, WireError> {
        Ok(ModelLayout {
            input: self.u32()? as usize,
            hidden: self.u32()? as usize,
            output: self.u32()? as usize,
        })
    }

    fn weights(&mut self) -> Result<ModelWeights, WireError> {
        let layout = self.layout()?;
        let count = self.u32()? as usize;
        if count.checked_mul(8).is_none_or(|b| b > self.rest().len()) {
            return Err(WireError::Truncated);
        }
        let values = (0..count)
            .map(|_| self.f64())
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ModelWeights::new(values, layout)?)
    }

    fn object<T: WireObject>(&mut self) -> Result<T, WireError> {
        let (v, used) = T::read_from(self.rest())?;
        self.skip(used)?;
        Ok(v)
    }

    fn objects<T: WireObject>(&mut self) -> Result<Vec<T>, WireError> {
        let count = self.u32()? as usize;
        let mut items = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            items.push(self.object()?);
        }
        Ok(items)
    }
}
