//! Everything that travels between entities.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::coordination::{DirectoryRef, SessionId, StoreItem, Verification};
use crate::crypto::{hex_bytes, EncryptionKey, SealedEnvelope, Signature, VerifyingKey};
use crate::protocol::emergency::SnapshotHandle;
use crate::protocol::prescription::Prescription;
use crate::protocol::record::{ExplicitIds, Fields, NATIONAL_ID};
use crate::protocol::result::{BlobLocation, ResultPointer};
use crate::sim::{EntityId, ObservedItem, Scope, Token, WireFault};

/// Opaque bytes, hex on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Blob(#[serde(with = "hex_bytes")] pub Vec<u8>);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Requirement {
    Lab { tests: BTreeSet<String> },
    Researcher { study: String },
}

/// What the patient hands its physician once the result is in, sealed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandoffBody {
    #[serde(with = "hex_bytes")]
    pub prescription_nonce: Vec<u8>,
    pub pointer: ResultPointer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payload {
    // Harness instructions.
    Consult { patient: EntityId, ids: ExplicitIds, tests: BTreeSet<String> },
    PlanLabVisit { lab: DirectoryRef },
    SetConsent { researcher: DirectoryRef, study: String, share: BTreeSet<String>, bypass: bool },
    StartStudy { study: String },
    CloseStudy { researcher: DirectoryRef, study: String },
    DepositEmergency,
    AccessEmergency { handle: SnapshotHandle },
    Probe { session: SessionId },

    // Lab flow.
    PrescriptionIssued { prescription: Prescription },
    AuthorizeLabSession { prescription: Prescription, lab: DirectoryRef },
    VerifyEntry { request: u64, entry: DirectoryRef, requirement: Requirement },
    EntryVerdict { request: u64, verdict: Verification },
    SessionGranted { session: SessionId, lab: DirectoryRef },
    SessionRefused { lab: DirectoryRef, reason: String },
    SessionOpened { session: SessionId, tests: BTreeSet<String> },
    StoreWrite { session: SessionId, item: StoreItem },
    StoreWritten { session: SessionId, slot: usize },
    StoreRejected { session: SessionId, reason: String },
    StoreRead { session: SessionId, slot: usize },
    StoreReadReply { session: SessionId, slot: usize, item: StoreItem },
    StoreNotification { session: SessionId, slot: usize },
    LabVisit { session: SessionId, prescription: Prescription, specimen: Fields, intake: Fields },
    BlobPut { location: BlobLocation, blob: Blob },
    BlobGet { location: BlobLocation },
    BlobReply { location: BlobLocation, blob: Option<Blob> },
    ResultHandoff { envelope: SealedEnvelope },
    HandoffAccepted { #[serde(with = "hex_bytes")] nonce: Vec<u8> },
    HandoffRejected { reason: String },

    // Research flow.
    ResearchRequest { researcher: DirectoryRef, study: String },
    ForwardedResearchRequest { researcher: DirectoryRef, study: String },
    VerifyResearcher { researcher: DirectoryRef, study: String },
    ResearchRefused { researcher: DirectoryRef, study: String },
    OpenAnonymizerChannel { session: SessionId, researcher: DirectoryRef, study: String },
    AnonymizerChannelReady { session: SessionId, key: EncryptionKey },
    ResearchChannel { researcher: DirectoryRef, study: String, session: SessionId, anonymizer_key: EncryptionKey },
    ReleasedBatch { study: String, envelope: SealedEnvelope },
    ReleaseBlocked { researcher: DirectoryRef, study: String },
    DirectSubmission { study: String, envelope: SealedEnvelope },

    // Emergency storage.
    EmergencyDeposit { handle: SnapshotHandle, envelope: SealedEnvelope, contact: VerifyingKey },
    EmergencyDeposited { handle: SnapshotHandle, version: usize },
    EmergencyDepositRejected { handle: SnapshotHandle, reason: String },
    EmergencyRead { handle: SnapshotHandle, accessor: VerifyingKey, signature: Signature },
    EmergencyReadReply { handle: SnapshotHandle, envelope: Option<SealedEnvelope> },
    EmergencyNotice { handle: SnapshotHandle, accessor: VerifyingKey, flag_raised: bool, time: u64 },
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        use Payload::*;
        match self {
            Consult { .. } => "consult",
            PlanLabVisit { .. } => "plan_lab_visit",
            SetConsent { .. } => "set_consent",
            StartStudy { .. } => "start_study",
            CloseStudy { .. } => "close_study",
            DepositEmergency => "deposit_emergency",
            AccessEmergency { .. } => "access_emergency",
            Probe { .. } => "probe",
            PrescriptionIssued { .. } => "prescription_issued",
            AuthorizeLabSession { .. } => "authorize_lab_session",
            VerifyEntry { .. } => "verify_entry",
            EntryVerdict { .. } => "entry_verdict",
            SessionGranted { .. } => "session_granted",
            SessionRefused { .. } => "session_refused",
            SessionOpened { .. } => "session_opened",
            StoreWrite { .. } => "store_write",
            StoreWritten { .. } => "store_written",
            StoreRejected { .. } => "store_rejected",
            StoreRead { .. } => "store_read",
            StoreReadReply { .. } => "store_read_reply",
            StoreNotification { .. } => "store_notification",
            LabVisit { .. } => "lab_visit",
            BlobPut { .. } => "blob_put",
            BlobGet { .. } => "blob_get",
            BlobReply { .. } => "blob_reply",
            ResultHandoff { .. } => "result_handoff",
            HandoffAccepted { .. } => "handoff_accepted",
            HandoffRejected { .. } => "handoff_rejected",
            ResearchRequest { .. } => "research_request",
            ForwardedResearchRequest { .. } => "forwarded_research_request",
            VerifyResearcher { .. } => "verify_researcher",
            ResearchRefused { .. } => "research_refused",
            OpenAnonymizerChannel { .. } => "open_anonymizer_channel",
            AnonymizerChannelReady { .. } => "anonymizer_channel_ready",
            ResearchChannel { .. } => "research_channel",
            ReleasedBatch { .. } => "released_batch",
            ReleaseBlocked { .. } => "release_blocked",
            DirectSubmission { .. } => "direct_submission",
            EmergencyDeposit { .. } => "emergency_deposit",
            EmergencyDeposited { .. } => "emergency_deposited",
            EmergencyDepositRejected { .. } => "emergency_deposit_rejected",
            EmergencyRead { .. } => "emergency_read",
            EmergencyReadReply { .. } => "emergency_read_reply",
            EmergencyNotice { .. } => "emergency_notice",
        }
    }

    pub fn session(&self) -> Option<SessionId> {
        use Payload::*;
        match self {
            Probe { session }
            | SessionGranted { session, .. }
            | SessionOpened { session, .. }
            | StoreWrite { session, .. }
            | StoreWritten { session, .. }
            | StoreRejected { session, .. }
            | StoreRead { session, .. }
            | StoreReadReply { session, .. }
            | StoreNotification { session, .. }
            | LabVisit { session, .. }
            | OpenAnonymizerChannel { session, .. }
            | AnonymizerChannelReady { session, .. }
            | ResearchChannel { session, .. } => Some(*session),
            _ => None,
        }
    }

    /// What the receiver learns from the cleartext parts of this message.
    /// Sealed contents are not included: those become disclosures once the
    /// receiver actually opens them.
    pub fn observations(&self) -> Vec<ObservedItem> {
        use Payload::*;
        let session_item = |s: &SessionId| ObservedItem::new(Scope::Session(*s)).with_id(Token::Session(*s));
        match self {
            StoreWrite { session, item } | StoreReadReply { session, item, .. } => {
                let mut obs = session_item(session);
                if let StoreItem::PublicKey(k) = item {
                    obs = obs.with_id(Token::PublicKey(*k));
                }
                vec![obs]
            }
            LabVisit {
                session,
                specimen,
                intake,
                ..
            } => {
                let mut obs = session_item(session)
                    .with_attributes(intake)
                    .with_attributes(specimen);
                if let Some(ssn) = intake.get(NATIONAL_ID) {
                    obs = obs.with_id(Token::NationalId(ssn.clone()));
                }
                vec![obs]
            }
            SessionGranted { session, .. }
            | SessionOpened { session, .. }
            | StoreWritten { session, .. }
            | StoreRead { session, .. }
            | StoreNotification { session, .. } => vec![session_item(session)],
            _ => Vec::new(),
        }
    }

    /// Applies an in-flight fault. Returns whether the payload changed.
    pub fn corrupt(&mut self, fault: WireFault) -> bool {
        use Payload::*;
        match (fault, self) {
            (WireFault::FlipPrescriptionByte, AuthorizeLabSession { prescription, .. })
            | (WireFault::FlipPrescriptionByte, LabVisit { prescription, .. }) => {
                match prescription.nonce.first_mut() {
                    Some(b) => *b ^= 0x01,
                    None => prescription.signature.bytes[0] ^= 0x01,
                }
                true
            }
            (WireFault::FlipEnvelopeBit, ResultHandoff { envelope })
            | (WireFault::FlipEnvelopeBit, ReleasedBatch { envelope, .. })
            | (WireFault::FlipEnvelopeBit, DirectSubmission { envelope, .. })
            | (WireFault::FlipEnvelopeBit, EmergencyDeposit { envelope, .. }) => flip_bit(&mut envelope.ciphertext),
            (WireFault::FlipEnvelopeBit, StoreWrite { item: StoreItem::Sealed(envelope), .. }) => {
                flip_bit(&mut envelope.ciphertext)
            }
            _ => false,
        }
    }
}

/// Flips one bit near the middle of `bytes`.
pub(crate) fn flip_bit(bytes: &mut [u8]) -> bool {
    if bytes.is_empty() {
        return false;
    }
    let at = bytes.len() / 2;
    bytes[at] ^= 0x10;
    true
}

/// Why a flow stopped. Carries no plaintext.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "code", content = "detail")]
pub enum AbortReason {
    NoPlannedLab,
    EmptyPrescription,
    PrescriptionInvalid,
    SessionRefused(String),
    StoreRejected(String),
    PointerUnreadable(String),
    PointerNotFromLab,
    BlobMissing,
    BlobMismatch,
    ResultUnreadable,
    ResultSignatureInvalid,
    ResultQuarantined(String),
    HandoffUnreadable(String),
    HandoffSignatureInvalid,
    UnknownConsult,
    UnknownSession,
    LabPrescriptionInvalid,
    Unexpected(String),
}

impl AbortReason {
    pub fn code(&self) -> &'static str {
        use AbortReason::*;
        match self {
            NoPlannedLab => "no_planned_lab",
            EmptyPrescription => "empty_prescription",
            PrescriptionInvalid => "prescription_invalid",
            SessionRefused(_) => "session_refused",
            StoreRejected(_) => "store_rejected",
            PointerUnreadable(_) => "pointer_unreadable",
            PointerNotFromLab => "pointer_not_from_lab",
            BlobMissing => "blob_missing",
            BlobMismatch => "blob_mismatch",
            ResultUnreadable => "result_unreadable",
            ResultSignatureInvalid => "result_signature_invalid",
            ResultQuarantined(_) => "result_quarantined",
            HandoffUnreadable(_) => "handoff_unreadable",
            HandoffSignatureInvalid => "handoff_signature_invalid",
            UnknownConsult => "unknown_consult",
            UnknownSession => "unknown_session",
            LabPrescriptionInvalid => "lab_prescription_invalid",
            Unexpected(_) => "unexpected",
        }
    }
}

impl std::fmt::Display for AbortReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        use AbortReason::*;
        match self {
            SessionRefused(d) | StoreRejected(d) | PointerUnreadable(d) | ResultQuarantined(d)
            | HandoffUnreadable(d) | Unexpected(d) => write!(f, "{}: {d}", self.code()),
            _ => f.write_str(self.code()),
        }
    }
}
