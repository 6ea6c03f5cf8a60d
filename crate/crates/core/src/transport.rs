//! In-process message bus shared by every protocol.
//!
//! All traffic between participants goes through [`Bus::send`], which checks
//! the protocol whitelist, logs the envelope, and either queues it for the
//! recipient or drops it according to the [`FailurePolicy`]. The resulting
//! [`AuditTrace`] is the input to [`audit`].

use alloc::collections::{BTreeMap, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paillier::{Ciphertext, FixedPoint, PublicKey};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Participant {
    /// HFL data holder, 0-based.
    Party(u32),
    Server,
    /// Vertical feature holder without labels.
    A,
    /// Vertical label holder.
    B,
    /// Trusted third party of the vertical linear protocol.
    C,
}

impl Participant {
    pub fn role(self) -> Role {
        match self {
            Participant::Party(_) => Role::Party,
            Participant::Server => Role::Server,
            Participant::A => Role::A,
            Participant::B => Role::B,
            Participant::C => Role::C,
        }
    }

    fn code(self) -> u64 {
        match self {
            Participant::Party(n) => u64::from(n),
            Participant::Server => 1 << 32,
            Participant::A => (1 << 32) + 1,
            Participant::B => (1 << 32) + 2,
            Participant::C => (1 << 32) + 3,
        }
    }
}

impl fmt::Display for Participant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Participant::Party(n) => write!(f, "party{}", n + 1),
            Participant::Server => f.write_str("server"),
            Participant::A => f.write_str("A"),
            Participant::B => f.write_str("B"),
            Participant::C => f.write_str("C"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Party,
    Server,
    A,
    B,
    C,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Hfl,
    Vflr,
    #[serde(rename = "secureboost")]
    SecureBoost,
}

/// Closed set of message kinds. Each kind has exactly one payload schema.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    PublicKey,
    EncParams,
    PlainLoss,
    AvgLoss,
    EncPartial,
    EncResidual,
    MaskedGrad,
    MaskedPlain,
    ConvergenceFlag,
    EncGradHess,
    EncBinStats,
    SplitDirective,
    NodePartition,
    PredictQuery,
    DirectionBit,
}

impl MessageKind {
    pub const ALL: [MessageKind; 15] = [
        MessageKind::PublicKey,
        MessageKind::EncParams,
        MessageKind::PlainLoss,
        MessageKind::AvgLoss,
        MessageKind::EncPartial,
        MessageKind::EncResidual,
        MessageKind::MaskedGrad,
        MessageKind::MaskedPlain,
        MessageKind::ConvergenceFlag,
        MessageKind::EncGradHess,
        MessageKind::EncBinStats,
        MessageKind::SplitDirective,
        MessageKind::NodePartition,
        MessageKind::PredictQuery,
        MessageKind::DirectionBit,
    ];

    /// Whether `payload` is the schema of this kind.
    pub fn accepts(self, payload: &Payload) -> bool {
        use MessageKind as K;
        matches!(
            (self, payload),
            (K::PublicKey, Payload::PublicKey { .. })
                | (K::EncParams, Payload::Ciphertexts(_))
                | (K::PlainLoss, Payload::Scalar(_))
                | (K::AvgLoss, Payload::Scalar(_))
                | (K::EncPartial, Payload::Ciphertexts(_))
                | (K::EncResidual, Payload::Ciphertexts(_))
                | (K::MaskedGrad, Payload::Ciphertexts(_))
                | (K::MaskedPlain, Payload::Masked(_))
                | (K::ConvergenceFlag, Payload::Flag(_))
                | (K::EncGradHess, Payload::GradHess { .. })
                | (K::EncBinStats, Payload::BinStats(_))
                | (K::SplitDirective, Payload::Split { .. })
                | (K::NodePartition, Payload::Partition { .. })
                | (K::PredictQuery, Payload::Query { .. })
                | (K::DirectionBit, Payload::Direction(_))
        )
    }
}

/// Encrypted per-bin sums for one feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncryptedBins {
    pub feature: usize,
    pub g: Vec<Ciphertext>,
    pub h: Vec<Ciphertext>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    PublicKey { n: BigUint, g: BigUint },
    Ciphertexts(Vec<Ciphertext>),
    Scalar(f64),
    /// Decrypted values that still carry the sender-side mask.
    Masked(Vec<FixedPoint>),
    Flag(bool),
    GradHess {
        ids: Vec<u64>,
        g: Vec<Ciphertext>,
        h: Vec<Ciphertext>,
    },
    BinStats(Vec<EncryptedBins>),
    Split {
        node: u64,
        feature: usize,
        edge: usize,
        record: u64,
    },
    Partition {
        node: u64,
        left: Vec<u64>,
        right: Vec<u64>,
    },
    Query { record: u64, sample: u64 },
    Direction(bool),
    /// Raw plaintext vector. No message kind accepts it; it exists so that
    /// leak experiments can be expressed and caught.
    PlainVector(Vec<f64>),
}

impl Payload {
    pub fn public_key(pk: &PublicKey) -> Self {
        Payload::PublicKey {
            n: pk.n().clone(),
            g: pk.g().clone(),
        }
    }

    /// Plaintext reals carried by the payload (ciphertexts excluded).
    pub fn plaintext_reals(&self) -> Vec<f64> {
        match self {
            Payload::Scalar(v) => alloc::vec![*v],
            Payload::PlainVector(v) => v.clone(),
            _ => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub from: Participant,
    pub to: Participant,
    pub epoch: usize,
    pub kind: MessageKind,
    pub payload: Payload,
}

impl Envelope {
    pub fn new(from: Participant, to: Participant, kind: MessageKind, payload: Payload) -> Self {
        Envelope {
            from,
            to,
            epoch: 0,
            kind,
            payload,
        }
    }
}

/// Allowed `(sender role, recipient role, kind)` triples of one protocol.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Whitelist {
    pub protocol: Protocol,
    rules: Vec<(Role, Role, MessageKind)>,
}

impl Whitelist {
    pub fn for_protocol(protocol: Protocol) -> Self {
        use MessageKind as K;
        use Role::*;
        let rules = match protocol {
            Protocol::Hfl => alloc::vec![
                (Party, Server, K::PublicKey),
                (Party, Server, K::EncParams),
                (Party, Server, K::PlainLoss),
                (Server, Party, K::EncParams),
                (Server, Party, K::AvgLoss),
            ],
            Protocol::Vflr => alloc::vec![
                (C, A, K::PublicKey),
                (C, B, K::PublicKey),
                (A, B, K::EncPartial),
                (B, A, K::EncResidual),
                (A, C, K::MaskedGrad),
                (B, C, K::MaskedGrad),
                (C, A, K::MaskedPlain),
                (C, B, K::MaskedPlain),
                (A, B, K::ConvergenceFlag),
                (B, A, K::ConvergenceFlag),
            ],
            Protocol::SecureBoost => alloc::vec![
                (B, A, K::PublicKey),
                (B, A, K::EncGradHess),
                (A, B, K::EncBinStats),
                (B, A, K::SplitDirective),
                (A, B, K::NodePartition),
                (B, A, K::NodePartition),
                (B, A, K::PredictQuery),
                (A, B, K::DirectionBit),
            ],
        };
        Whitelist { protocol, rules }
    }

    pub fn allows(&self, from: Participant, to: Participant, kind: MessageKind) -> bool {
        self.rules
            .iter()
            .any(|&(f, t, k)| f == from.role() && t == to.role() && k == kind)
    }

    pub fn kinds(&self) -> impl Iterator<Item = MessageKind> + '_ {
        self.rules.iter().map(|r| r.2)
    }
}

/// Seeded Bernoulli drops on designated legs. One draw per
/// `(sender, epoch)`, shared by every message that sender puts on a
/// designated leg during that epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailurePolicy {
    pub drop_prob: f64,
    pub seed: u64,
    pub legs: Vec<(Role, Role)>,
}

impl FailurePolicy {
    pub fn none() -> Self {
        FailurePolicy {
            drop_prob: 0.0,
            seed: 0,
            legs: Vec::new(),
        }
    }

    /// Drops on the party-to-server upload leg only.
    pub fn hfl_uploads(drop_prob: f64, seed: u64) -> Self {
        FailurePolicy {
            drop_prob,
            seed,
            legs: alloc::vec![(Role::Party, Role::Server)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(Error::Config(alloc::format!(
                "drop probability {} outside [0, 1]",
                self.drop_prob
            )));
        }
        Ok(())
    }

    pub fn is_active(&self) -> bool {
        self.drop_prob > 0.0 && !self.legs.is_empty()
    }

    pub fn drops(&self, from: Participant, to: Participant, epoch: usize) -> bool {
        // epoch 0 is the setup round and always reliable
        if epoch == 0 || self.drop_prob <= 0.0 || !self.legs.contains(&(from.role(), to.role())) {
            return false;
        }
        seed::unit_interval(self.seed, &[seed::tags::DROPOUT, from.code(), epoch as u64])
            < self.drop_prob
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Delivery {
    Delivered,
    Dropped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub seq: u64,
    /// Logical clock (protocol epoch) at send time.
    pub epoch: usize,
    pub status: Delivery,
    pub envelope: Envelope,
}

/// Append-only record of every send.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditTrace {
    entries: Vec<TraceEntry>,
}

impl AuditTrace {
    pub fn entries(&self) -> &[TraceEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn push(&mut self, entry: TraceEntry) {
        self.entries.push(entry);
    }
}

pub struct Bus {
    whitelist: Whitelist,
    failure: FailurePolicy,
    enforce: bool,
    participants: Vec<Participant>,
    clock: usize,
    sends: u64,
    queues: BTreeMap<Participant, VecDeque<Envelope>>,
    trace: AuditTrace,
}

impl Bus {
    pub fn new(protocol: Protocol, participants: &[Participant]) -> Self {
        Bus {
            whitelist: Whitelist::for_protocol(protocol),
            failure: FailurePolicy::none(),
            enforce: true,
            participants: participants.to_vec(),
            clock: 0,
            sends: 0,
            queues: participants.iter().map(|&p| (p, VecDeque::new())).collect(),
            trace: AuditTrace::default(),
        }
    }

    /// Installs a failure policy. Only the horizontal protocol tolerates
    /// message loss; vertical protocols reject any active policy.
    pub fn with_failures(mut self, policy: FailurePolicy) -> Result<Self> {
        policy.validate()?;
        if policy.is_active() && self.whitelist.protocol != Protocol::Hfl {
            return Err(Error::Config(
                "failure injection is only supported for horizontal runs".into(),
            ));
        }
        self.failure = policy;
        Ok(self)
    }

    /// Disables send-time whitelist checks. Violations are still recorded in
    /// the trace and reported by [`audit`]; used to build negative controls.
    pub fn unchecked(mut self) -> Self {
        self.enforce = false;
        self
    }

    pub fn protocol(&self) -> Protocol {
        self.whitelist.protocol
    }

    pub fn whitelist(&self) -> &Whitelist {
        &self.whitelist
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.clock = epoch;
    }

    pub fn epoch(&self) -> usize {
        self.clock
    }

    pub fn send_count(&self) -> u64 {
        self.sends
    }

    pub fn trace(&self) -> &AuditTrace {
        &self.trace
    }

    pub fn into_trace(self) -> AuditTrace {
        self.trace
    }

    pub fn send(&mut self, mut env: Envelope) -> Result<Delivery> {
        for p in [env.from, env.to] {
            if !self.participants.contains(&p) {
                return Err(Error::UnknownParticipant(p));
            }
        }
        if self.enforce {
            if !self.whitelist.allows(env.from, env.to, env.kind) {
                return Err(Error::Whitelist {
                    from: env.from,
                    to: env.to,
                    kind: env.kind,
                });
            }
            if !env.kind.accepts(&env.payload) {
                return Err(Error::PayloadSchema(env.kind));
            }
        }
        env.epoch = self.clock;
        self.sends += 1;
        let status = if self.failure.drops(env.from, env.to, self.clock) {
            Delivery::Dropped
        } else {
            Delivery::Delivered
        };
        self.trace.push(TraceEntry {
            seq: self.sends - 1,
            epoch: self.clock,
            status,
            envelope: env.clone(),
        });
        if status == Delivery::Delivered {
            self.queues.entry(env.to).or_default().push_back(env);
        }
        Ok(status)
    }

    /// Removes and returns the oldest queued message of `kind` for `at`.
    pub fn try_recv(&mut self, at: Participant, kind: MessageKind) -> Option<Envelope> {
        let queue = self.queues.get_mut(&at)?;
        let pos = queue.iter().position(|e| e.kind == kind)?;
        queue.remove(pos)
    }

    pub fn recv(&mut self, at: Participant, kind: MessageKind) -> Result<Envelope> {
        self.try_recv(at, kind)
            .ok_or(Error::MissingMessage { at, expected: kind })
    }

    /// Every queued message of `kind` for `at`, in arrival order.
    pub fn drain(&mut self, at: Participant, kind: MessageKind) -> Vec<Envelope> {
        let Some(queue) = self.queues.get_mut(&at) else {
            return Vec::new();
        };
        let (taken, kept): (Vec<_>, Vec<_>) = queue.drain(..).partition(|e| e.kind == kind);
        queue.extend(kept);
        taken
    }

    pub fn pending(&self, at: Participant) -> usize {
        self.queues.get(&at).map_or(0, VecDeque::len)
    }
}

/// Plaintext vectors that must never cross a party boundary, tagged with a
/// description used in reports.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Secrets {
    entries: Vec<(String, Vec<f64>)>,
    // Lets the audit read fixed-point payloads as reals.
    decoder: Option<(PublicKey, u32)>,
}

impl Secrets {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_decoder(mut self, pk: PublicKey, frac_bits: u32) -> Self {
        self.decoder = Some((pk, frac_bits));
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn reals_of(&self, payload: &Payload) -> Vec<f64> {
        match (payload, &self.decoder) {
            (Payload::Masked(v), Some((pk, f))) => v.iter().map(|x| pk.decode(x, *f)).collect(),
            _ => payload.plaintext_reals(),
        }
    }

    pub fn add(&mut self, label: impl Into<String>, values: Vec<f64>) {
        if !values.is_empty() {
            self.entries.push((label.into(), values));
        }
    }

    fn find_in(&self, reals: &[f64]) -> Option<&str> {
        const EPS: f64 = 1e-12;
        self.entries.iter().find_map(|(label, secret)| {
            // single secret reals are matched only by a full one-element payload,
            // longer secrets by any contiguous window
            let hit = if secret.len() == 1 {
                reals.len() == 1 && (reals[0] - secret[0]).abs() <= EPS
            } else {
                reals.len() >= secret.len()
                    && reals
                        .windows(secret.len())
                        .any(|w| w.iter().zip(secret).all(|(a, b)| (a - b).abs() <= EPS))
            };
            hit.then_some(label.as_str())
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ViolationReason {
    NotWhitelisted,
    SchemaMismatch,
    SecretLeak(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub seq: u64,
    pub from: Participant,
    pub to: Participant,
    pub kind: MessageKind,
    pub reason: ViolationReason,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub protocol: Protocol,
    pub checked: usize,
    pub violations: Vec<Violation>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every trace entry (delivered or dropped) against the whitelist,
/// the kind's payload schema, and the registered secrets.
pub fn audit(trace: &AuditTrace, whitelist: &Whitelist, secrets: &Secrets) -> AuditReport {
    let mut violations = Vec::new();
    for entry in trace.entries() {
        let env = &entry.envelope;
        let mut flag = |reason| {
            violations.push(Violation {
                seq: entry.seq,
                from: env.from,
                to: env.to,
                kind: env.kind,
                reason,
            })
        };
        if !whitelist.allows(env.from, env.to, env.kind) {
            flag(ViolationReason::NotWhitelisted);
        }
        if !env.kind.accepts(&env.payload) {
            flag(ViolationReason::SchemaMismatch);
        }
        if let Some(label) = secrets.find_in(&secrets.reals_of(&env.payload)) {
            flag(ViolationReason::SecretLeak(label.into()));
        }
    }
    AuditReport {
        protocol: whitelist.protocol,
        checked: trace.len(),
        violations,
    }
}

/// Negative-control instrumentation: a participant sends one of its
/// plaintext vectors as if it were a legitimate message. Only meaningful on
/// an [`Bus::unchecked`] bus; an enforcing bus rejects the send.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LeakProbe {
    #[default]
    Off,
    AtEpoch(usize),
}

impl LeakProbe {
    pub fn fires(self, epoch: usize) -> bool {
        self == LeakProbe::AtEpoch(epoch)
    }
}
