//! Single-threaded discrete-event core.
//!
//! Entities are [`Node`]s that only ever see their own state and the
//! messages addressed to them. The [`World`] owns a FIFO queue and a logical
//! clock. Each delivery or disclosure becomes one record in the
//! [`EventLog`], and so does each injected fault.

pub mod audit;
pub mod log;

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::coordination::DirectoryRef;
use crate::crypto::{digest_hex, EncryptionKey, VerifyingKey};
use crate::protocol::messages::{AbortReason, Payload};

pub use audit::Audit;
pub use log::{EventLog, LogKind, LogRecord, ObservedItem, Scope, Token};

/// Entity name. Simulation metadata: never placed inside a sealed payload.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub String);

impl EntityId {
    pub const AUTH: &'static str = "auth";
    pub const ANONYMIZER: &'static str = "anonymizer";
    pub const RESULT_STORE: &'static str = "result-store";
    pub const EMERGENCY_SERVER: &'static str = "emergency-server";
    pub const INTRUDER: &'static str = "intruder";
    pub const HARNESS: &'static str = "harness";

    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn patient(i: usize) -> Self {
        Self(format!("patient:{i}"))
    }

    pub fn physician(i: usize) -> Self {
        Self(format!("physician:{i}"))
    }

    pub fn contact(i: usize) -> Self {
        Self(format!("contact:{i}"))
    }

    pub fn lab(r: &DirectoryRef) -> Self {
        Self(format!("lab:{r}"))
    }

    pub fn researcher(r: &DirectoryRef) -> Self {
        Self(format!("researcher:{r}"))
    }

    pub fn directory(directory_id: &str) -> Self {
        Self(format!("dir:{directory_id}"))
    }

    pub fn auth() -> Self {
        Self(Self::AUTH.into())
    }

    pub fn anonymizer() -> Self {
        Self(Self::ANONYMIZER.into())
    }

    pub fn result_store() -> Self {
        Self(Self::RESULT_STORE.into())
    }

    pub fn emergency_server() -> Self {
        Self(Self::EMERGENCY_SERVER.into())
    }

    pub fn intruder() -> Self {
        Self(Self::INTRUDER.into())
    }

    pub fn harness() -> Self {
        Self(Self::HARNESS.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn kind(&self) -> Option<EntityKind> {
        let head = self.0.split(':').next().unwrap_or_default();
        Some(match head {
            "patient" => EntityKind::Patient,
            "physician" => EntityKind::Physician,
            "lab" => EntityKind::Lab,
            "researcher" => EntityKind::Researcher,
            "dir" => EntityKind::Directory,
            "contact" => EntityKind::EmergencyContact,
            Self::AUTH => EntityKind::AuthServer,
            Self::ANONYMIZER => EntityKind::Anonymizer,
            Self::RESULT_STORE => EntityKind::ResultStore,
            Self::EMERGENCY_SERVER => EntityKind::EmergencyServer,
            Self::INTRUDER => EntityKind::Intruder,
            Self::HARNESS => EntityKind::Harness,
            _ => return None,
        })
    }

    pub fn is(&self, kind: EntityKind) -> bool {
        self.kind() == Some(kind)
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Patient,
    Physician,
    Lab,
    Researcher,
    Directory,
    AuthServer,
    Anonymizer,
    ResultStore,
    EmergencyServer,
    EmergencyContact,
    Intruder,
    Harness,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PkiEntry {
    pub kind: EntityKind,
    pub verifying: VerifyingKey,
    pub encryption: Option<EncryptionKey>,
}

/// The certifying registry: who holds which public keys. Read-only once the
/// world is built.
#[derive(Debug, Clone, Default)]
pub struct Pki {
    entries: BTreeMap<EntityId, PkiEntry>,
    by_key: BTreeMap<VerifyingKey, EntityId>,
}

impl Pki {
    pub fn register(&mut self, id: EntityId, entry: PkiEntry) {
        self.by_key.insert(entry.verifying, id.clone());
        self.entries.insert(id, entry);
    }

    pub fn entry(&self, id: &EntityId) -> Option<&PkiEntry> {
        self.entries.get(id)
    }

    pub fn contains(&self, id: &EntityId) -> bool {
        self.entries.contains_key(id)
    }

    pub fn verifying(&self, id: &EntityId) -> Option<VerifyingKey> {
        self.entries.get(id).map(|e| e.verifying)
    }

    pub fn encryption(&self, id: &EntityId) -> Option<EncryptionKey> {
        self.entries.get(id).and_then(|e| e.encryption)
    }

    pub fn owner_of(&self, key: &VerifyingKey) -> Option<&EntityId> {
        self.by_key.get(key)
    }

    /// Whether `key` is registered to an entity of `kind`.
    pub fn key_is(&self, key: &VerifyingKey, kind: EntityKind) -> bool {
        self.owner_of(key)
            .and_then(|id| self.entries.get(id))
            .is_some_and(|e| e.kind == kind)
    }

    pub fn of_kind(&self, kind: EntityKind) -> impl Iterator<Item = &EntityId> {
        self.entries
            .iter()
            .filter(move |(_, e)| e.kind == kind)
            .map(|(id, _)| id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &EntityId> {
        self.entries.keys()
    }
}

/// Out-of-band facts an entity reports to the harness. Never delivered to
/// another entity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "signal")]
pub enum Signal {
    ResultIssued { digest: String },
    ResultDelivered { digest: String },
    KeyUseRecorded { subkey: String },
    Aborted { reason: AbortReason },
    Submitted { session: String, slot: usize },
    ResearchRefused { study: String },
    ReleaseWithheld { study: String, pool: usize },
    ReleaseBlocked { study: String },
    ReleaseReceived { study: String, records: usize },
    DirectSubmissionReceived { study: String },
    EmergencyDeposited { version: usize },
    EmergencyDepositRejected,
    EmergencyOpened,
    EmergencyOpenFailed,
    EmergencyNoticeReceived { flag_raised: bool },
}

/// Damage done to data at rest inside one entity's storage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StorageFault {
    /// Replace a deposited public key with the attacker's.
    SubstituteKey(EncryptionKey),
    /// Flip one bit of a sealed item in a temp store.
    FlipSealedBit,
    /// Flip one bit of a stored blob.
    FlipBlobBit,
}

/// Damage done to a message in flight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WireFault {
    FlipPrescriptionByte,
    FlipEnvelopeBit,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FaultAction {
    Wire(WireFault),
    /// Applied by the receiver's storage right after it handles the trigger.
    Storage(StorageFault),
}

/// One-shot fault fired by the first delivered message that matches.
#[derive(Debug, Clone)]
pub struct Fault {
    pub label: String,
    pub message_type: &'static str,
    pub receiver_kind: EntityKind,
    /// Extra predicate on the payload, e.g. "carries a public key".
    pub only_if: fn(&Payload) -> bool,
    pub action: FaultAction,
    /// Message the harness injects after the fault fires.
    pub follow_up: Option<(EntityId, FollowUp)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FollowUp {
    /// Attacker tries to read the tampered session's store.
    ProbeSession,
}

pub trait Node {
    fn handle(&mut self, from: &EntityId, payload: Payload, ctx: &mut Context<'_>);

    /// Applies a storage fault triggered by `trigger`. Returns whether
    /// anything was changed.
    fn apply_fault(&mut self, _fault: &StorageFault, _trigger: &Payload) -> bool {
        false
    }

    fn audit(&self, _audit: &mut Audit) {}
}

/// A plaintext the handling entity now holds.
#[derive(Debug, Clone)]
pub struct Disclosure {
    pub label: String,
    pub item: ObservedItem,
    pub digest: String,
}

/// The effects a handler can have outside its own state.
pub struct Context<'a> {
    me: &'a EntityId,
    pki: &'a Pki,
    now: u64,
    outbox: Vec<(EntityId, Payload)>,
    disclosures: Vec<Disclosure>,
    signals: Vec<Signal>,
    claims: Vec<(Scope, EntityId)>,
}

impl<'a> Context<'a> {
    pub fn new(me: &'a EntityId, pki: &'a Pki, now: u64) -> Self {
        Self {
            me,
            pki,
            now,
            outbox: Vec::new(),
            disclosures: Vec::new(),
            signals: Vec::new(),
            claims: Vec::new(),
        }
    }

    pub fn me(&self) -> &EntityId {
        self.me
    }

    pub fn pki(&self) -> &Pki {
        self.pki
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn send(&mut self, to: EntityId, payload: Payload) {
        self.outbox.push((to, payload));
    }

    pub fn disclose(&mut self, label: impl Into<String>, item: ObservedItem, digest: String) {
        self.disclosures.push(Disclosure {
            label: label.into(),
            item,
            digest,
        });
    }

    pub fn signal(&mut self, signal: Signal) {
        self.signals.push(signal);
    }

    pub fn abort(&mut self, reason: AbortReason) {
        self.signals.push(Signal::Aborted { reason });
    }

    /// Ground truth for the adversary metrics: `scope` concerns `patient`.
    /// Invisible to every entity.
    pub fn claim(&mut self, scope: Scope, patient: EntityId) {
        self.claims.push((scope, patient));
    }

    pub fn sent(&self) -> &[(EntityId, Payload)] {
        &self.outbox
    }

    pub fn signals(&self) -> &[Signal] {
        &self.signals
    }

    pub fn disclosures(&self) -> &[Disclosure] {
        &self.disclosures
    }
}

#[derive(Debug, Clone)]
struct InFlight {
    from: EntityId,
    to: EntityId,
    payload: Payload,
}

pub struct World {
    nodes: BTreeMap<EntityId, Box<dyn Node>>,
    pki: Pki,
    queue: VecDeque<InFlight>,
    clock: u64,
    log: EventLog,
    faults: Vec<Fault>,
    signals: Vec<(EntityId, Signal)>,
    truth: BTreeMap<Scope, EntityId>,
    undeliverable: usize,
}

impl World {
    pub fn new(pki: Pki) -> Self {
        Self {
            nodes: BTreeMap::new(),
            pki,
            queue: VecDeque::new(),
            clock: 0,
            log: EventLog::default(),
            faults: Vec::new(),
            signals: Vec::new(),
            truth: BTreeMap::new(),
            undeliverable: 0,
        }
    }

    pub fn add_node(&mut self, id: EntityId, node: Box<dyn Node>) {
        self.nodes.insert(id, node);
    }

    pub fn pki(&self) -> &Pki {
        &self.pki
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn truth(&self) -> &BTreeMap<Scope, EntityId> {
        &self.truth
    }

    pub fn undeliverable(&self) -> usize {
        self.undeliverable
    }

    pub fn now(&self) -> u64 {
        self.clock
    }

    /// Queues a message from the harness.
    pub fn post(&mut self, to: EntityId, payload: Payload) {
        self.queue.push_back(InFlight {
            from: EntityId::harness(),
            to,
            payload,
        });
    }

    pub fn arm(&mut self, fault: Fault) {
        self.faults.push(fault);
    }

    pub fn disarm_all(&mut self) -> Vec<Fault> {
        std::mem::take(&mut self.faults)
    }

    /// Signals raised since the last call.
    pub fn take_signals(&mut self) -> Vec<(EntityId, Signal)> {
        std::mem::take(&mut self.signals)
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn matching_fault(&mut self, msg: &InFlight) -> Option<Fault> {
        let receiver_kind = msg.to.kind()?;
        let at = self.faults.iter().position(|f| {
            f.message_type == msg.payload.kind()
                && f.receiver_kind == receiver_kind
                && (f.only_if)(&msg.payload)
        })?;
        Some(self.faults.remove(at))
    }

    /// Delivers messages until the queue is empty or `max_steps` have run.
    /// Returns the number delivered.
    pub fn run_until_quiet(&mut self, max_steps: usize) -> usize {
        let mut steps = 0;
        while steps < max_steps {
            let Some(mut msg) = self.queue.pop_front() else {
                break;
            };
            steps += 1;
            if !self.nodes.contains_key(&msg.to) {
                self.undeliverable += 1;
                continue;
            }

            let fault = self.matching_fault(&msg);
            let mut storage_fault = None;
            if let Some(f) = &fault {
                match &f.action {
                    FaultAction::Wire(w) => {
                        if msg.payload.corrupt(*w) {
                            self.log_fault(&msg.to, &f.label, &msg.payload);
                        }
                    }
                    FaultAction::Storage(s) => storage_fault = Some(s.clone()),
                }
            }

            let now = self.tick();
            let payload_json = serde_json::to_vec(&msg.payload).expect("payload serializes");
            self.log.push(LogRecord {
                time: now,
                sender: msg.from.clone(),
                receiver: msg.to.clone(),
                kind: LogKind::Message(msg.payload.kind().to_string()),
                session: msg.payload.session(),
                digest: digest_hex(&payload_json),
                observed: msg.payload.observations(),
                payload: Some(msg.payload.clone()),
            });

            let trigger = storage_fault.as_ref().map(|_| msg.payload.clone());
            let node = self.nodes.get_mut(&msg.to).expect("checked above");
            let mut ctx = Context::new(&msg.to, &self.pki, now);
            node.handle(&msg.from, msg.payload, &mut ctx);
            let Context {
                outbox,
                disclosures,
                signals,
                claims,
                ..
            } = ctx;

            if let (Some(sf), Some(trigger)) = (storage_fault, trigger) {
                let node = self.nodes.get_mut(&msg.to).expect("checked above");
                if node.apply_fault(&sf, &trigger) {
                    let label = fault.as_ref().map(|f| f.label.clone()).unwrap_or_default();
                    self.log_fault(&msg.to, &label, &trigger);
                    if let Some((attacker, FollowUp::ProbeSession)) =
                        fault.as_ref().and_then(|f| f.follow_up.clone())
                    {
                        if let Some(session) = trigger.session() {
                            self.queue.push_back(InFlight {
                                from: EntityId::harness(),
                                to: attacker,
                                payload: Payload::Probe { session },
                            });
                        }
                    }
                }
            }

            for d in disclosures {
                let t = self.tick();
                let session = match &d.item.scope {
                    Scope::Session(s) | Scope::Submission { session: s, .. } => Some(*s),
                    Scope::Isolated(_) => None,
                };
                self.log.push(LogRecord {
                    time: t,
                    sender: msg.to.clone(),
                    receiver: msg.to.clone(),
                    kind: LogKind::Disclosure(d.label),
                    session,
                    digest: d.digest,
                    observed: vec![d.item],
                    payload: None,
                });
            }
            for s in signals {
                self.signals.push((msg.to.clone(), s));
            }
            for (scope, patient) in claims {
                self.truth.insert(scope, patient);
            }
            for (to, payload) in outbox {
                self.queue.push_back(InFlight {
                    from: msg.to.clone(),
                    to,
                    payload,
                });
            }
        }
        steps
    }

    fn log_fault(&mut self, target: &EntityId, label: &str, trigger: &Payload) {
        let t = self.tick();
        self.log.push(LogRecord {
            time: t,
            sender: EntityId::intruder(),
            receiver: target.clone(),
            kind: LogKind::Fault(label.to_string()),
            session: trigger.session(),
            digest: digest_hex(label.as_bytes()),
            observed: Vec::new(),
            payload: None,
        });
    }

    pub fn is_quiet(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn audit(&self) -> Audit {
        let mut audit = Audit::default();
        for node in self.nodes.values() {
            node.audit(&mut audit);
        }
        audit
    }
}
