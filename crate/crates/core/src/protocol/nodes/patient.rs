use std::collections::{BTreeMap, BTreeSet};

use crate::coordination::{DirectoryRef, SessionId, StoreItem};
use crate::crypto::{digest_hex, open, seal, symmetric_decrypt, SigningIdentity};
use crate::key_pool::{KeyPool, SubKeyRef};
use crate::protocol::emergency::SnapshotHandle;
use crate::protocol::messages::{AbortReason, Blob, HandoffBody, Payload};
use crate::protocol::nodes::TokenMode;
use crate::protocol::prescription::Prescription;
use crate::protocol::record::{is_explicit_id, sanitize_record, Fields, RecordVault, QUASI_ID_FIELDS};
use crate::protocol::result::{BlobLocation, ResultFile, ResultPointer};
use crate::rng::SimRng;
use crate::sim::audit::PoolAudit;
use crate::sim::{Audit, Context, EntityId, EntityKind, Node, ObservedItem, Scope, Signal};

/// Where the current lab flow stands.
#[derive(Debug, Clone)]
enum Stage {
    AwaitingSession,
    Depositing(SessionId),
    Visited(SessionId),
    Fetching { session: SessionId, pointer: ResultPointer },
    HandedOff(SessionId),
}

#[derive(Debug, Clone)]
struct LabFlow {
    lab: DirectoryRef,
    prescription: Prescription,
    subkey: Option<SubKeyRef>,
    stage: Stage,
}

#[derive(Debug, Clone)]
struct Consent {
    share: BTreeSet<String>,
    bypass: bool,
}

/// Everything a patient starts with.
pub struct PatientSetup {
    pub id: EntityId,
    pub identity: SigningIdentity,
    pub pool: KeyPool,
    pub vault: RecordVault,
    pub mode: TokenMode,
    pub emergency_handle: SnapshotHandle,
    pub contact: Option<EntityId>,
    pub rng: SimRng,
}

pub struct PatientNode {
    id: EntityId,
    identity: SigningIdentity,
    pool: KeyPool,
    vault: RecordVault,
    mode: TokenMode,
    rng: SimRng,
    planned_lab: Option<DirectoryRef>,
    flow: Option<LabFlow>,
    consents: BTreeMap<(DirectoryRef, String), Consent>,
    submissions: BTreeSet<SessionId>,
    emergency_handle: SnapshotHandle,
    contact: Option<EntityId>,
    notices: usize,
}

impl PatientNode {
    pub fn new(setup: PatientSetup) -> Self {
        Self {
            id: setup.id,
            identity: setup.identity,
            pool: setup.pool,
            vault: setup.vault,
            mode: setup.mode,
            rng: setup.rng,
            planned_lab: None,
            flow: None,
            consents: BTreeMap::new(),
            submissions: BTreeSet::new(),
            emergency_handle: setup.emergency_handle,
            contact: setup.contact,
            notices: 0,
        }
    }

    fn abort(&mut self, reason: AbortReason, ctx: &mut Context<'_>) {
        self.flow = None;
        ctx.abort(reason);
    }

    fn lab_flow_session(&self, session: SessionId) -> bool {
        self.flow.as_ref().is_some_and(|f| match f.stage {
            Stage::Depositing(s) | Stage::Visited(s) | Stage::HandedOff(s) => s == session,
            Stage::Fetching { session: s, .. } => s == session,
            Stage::AwaitingSession => false,
        })
    }

    fn intake(&self) -> Fields {
        match self.mode {
            TokenMode::DaprivKeys => Fields::new(),
            TokenMode::BaselineSsn => self
                .vault
                .record()
                .fields()
                .into_iter()
                .filter(|(k, _)| is_explicit_id(k) || QUASI_ID_FIELDS.contains(&k.as_str()))
                .collect(),
        }
    }

    fn specimen(&self, tests: &BTreeSet<String>) -> Fields {
        let record = self.vault.record();
        tests
            .iter()
            .filter_map(|t| record.field(t).map(|v| (t.clone(), v)))
            .collect()
    }

    fn on_pointer(&mut self, item: StoreItem, ctx: &mut Context<'_>) {
        let Some(flow) = self.flow.as_ref() else { return };
        let (Stage::Visited(session), Some(subkey)) = (&flow.stage, flow.subkey) else {
            return;
        };
        let session = *session;
        let StoreItem::Sealed(envelope) = item else {
            return self.abort(AbortReason::PointerUnreadable("not sealed".into()), ctx);
        };
        let lab_key = ctx.pki().verifying(&EntityId::lab(&flow.lab));
        let opened = self
            .pool
            .decryption_key_for(&subkey.public_key)
            .map_err(|e| e.to_string())
            .and_then(|dk| open(&envelope, &dk).map_err(|e| e.to_string()));
        let opened = match opened {
            Ok(o) => o,
            Err(e) => return self.abort(AbortReason::PointerUnreadable(e), ctx),
        };
        if opened.verified_signer().is_none() || opened.verified_signer() != lab_key {
            return self.abort(AbortReason::PointerNotFromLab, ctx);
        }
        let Some(pointer) = ResultPointer::from_bytes(&opened.plaintext) else {
            return self.abort(AbortReason::PointerUnreadable("malformed pointer".into()), ctx);
        };
        if !pointer.verifies() || Some(pointer.lab_signature.signer_public) != lab_key {
            return self.abort(AbortReason::PointerNotFromLab, ctx);
        }
        ctx.send(
            EntityId::result_store(),
            Payload::BlobGet {
                location: pointer.location.clone(),
            },
        );
        if let Some(flow) = self.flow.as_mut() {
            flow.stage = Stage::Fetching { session, pointer };
        }
    }

    fn on_blob(&mut self, location: BlobLocation, blob: Option<Blob>, ctx: &mut Context<'_>) {
        let Some(flow) = self.flow.as_ref() else { return };
        let Stage::Fetching { session, pointer } = &flow.stage else {
            return;
        };
        if pointer.location != location {
            return;
        }
        let (session, pointer) = (*session, pointer.clone());
        let lab_key = ctx.pki().verifying(&EntityId::lab(&flow.lab));
        let Some(Blob(ciphertext)) = blob else {
            return self.abort(AbortReason::BlobMissing, ctx);
        };
        if BlobLocation::of(&ciphertext) != location {
            return self.abort(AbortReason::BlobMismatch, ctx);
        }
        let Ok(bytes) = symmetric_decrypt(&pointer.symmetric_key, &ciphertext) else {
            return self.abort(AbortReason::ResultUnreadable, ctx);
        };
        let Some(file) = ResultFile::from_bytes(&bytes) else {
            return self.abort(AbortReason::ResultUnreadable, ctx);
        };
        if !file.verifies() || Some(file.lab()) != lab_key {
            return self.abort(AbortReason::ResultSignatureInvalid, ctx);
        }
        let pki = ctx.pki();
        let ingested = self.vault.ingest(
            file.measurements.clone(),
            file.lab_signature.clone(),
            |k| pki.key_is(k, EntityKind::Lab),
        );
        if let Err(e) = ingested {
            return self.abort(AbortReason::ResultQuarantined(e.to_string()), ctx);
        }
        ctx.disclose(
            "lab-result",
            ObservedItem::new(Scope::Session(session)).with_attributes(&file.measurements),
            digest_hex(&bytes),
        );

        let Some(flow) = self.flow.as_mut() else { return };
        let nonce = flow.prescription.nonce.clone();
        let doctor = ctx.pki().owner_of(&flow.prescription.physician_pub).cloned();
        let Some((doctor, key)) = doctor.and_then(|d| ctx.pki().encryption(&d).map(|k| (d, k))) else {
            return self.abort(AbortReason::Unexpected("physician has no encryption key".into()), ctx);
        };
        flow.stage = Stage::HandedOff(session);
        let body = HandoffBody {
            prescription_nonce: nonce,
            pointer,
        };
        let bytes = serde_json::to_vec(&body).expect("handoff serializes");
        let envelope = seal(&bytes, &key, Some(&self.identity), &mut self.rng);
        ctx.send(doctor, Payload::ResultHandoff { envelope });
    }

    /// The sanitized record a consenting patient shares.
    fn submission(&self, consent: &Consent) -> Vec<u8> {
        let fields = sanitize_record(self.vault.record(), &consent.share)
            .map(|s| s.fields)
            .unwrap_or_default();
        serde_json::to_vec(&fields).expect("fields serialize")
    }
}

impl Node for PatientNode {
    fn handle(&mut self, from: &EntityId, payload: Payload, ctx: &mut Context<'_>) {
        match payload {
            Payload::PlanLabVisit { lab } if from.is(EntityKind::Harness) => self.planned_lab = Some(lab),
            Payload::PrescriptionIssued { prescription } if from.is(EntityKind::Physician) => {
                let Some(lab) = self.planned_lab.take() else {
                    return self.abort(AbortReason::NoPlannedLab, ctx);
                };
                ctx.send(
                    EntityId::auth(),
                    Payload::AuthorizeLabSession {
                        prescription: prescription.clone(),
                        lab: lab.clone(),
                    },
                );
                self.flow = Some(LabFlow {
                    lab,
                    prescription,
                    subkey: None,
                    stage: Stage::AwaitingSession,
                });
            }
            Payload::SessionRefused { reason, .. } if self.flow.is_some() => {
                self.abort(AbortReason::SessionRefused(reason), ctx)
            }
            Payload::SessionGranted { session, lab } => {
                let Some(flow) = self.flow.as_mut() else { return };
                if flow.lab != lab || !matches!(flow.stage, Stage::AwaitingSession) {
                    return;
                }
                let subkey = self.pool.select_public_key();
                flow.subkey = Some(subkey);
                flow.stage = Stage::Depositing(session);
                ctx.claim(Scope::Session(session), ctx.me().clone());
                ctx.send(
                    EntityId::auth(),
                    Payload::StoreWrite {
                        session,
                        item: StoreItem::PublicKey(subkey.public_key),
                    },
                );
            }
            Payload::StoreWritten { session, slot } => {
                if self.submissions.remove(&session) {
                    ctx.claim(Scope::Submission { session, slot }, ctx.me().clone());
                    ctx.signal(Signal::Submitted {
                        session: session.to_string(),
                        slot,
                    });
                    return;
                }
                let Some(flow) = self.flow.as_mut() else { return };
                if !matches!(flow.stage, Stage::Depositing(s) if s == session) {
                    return;
                }
                flow.stage = Stage::Visited(session);
                let prescription = flow.prescription.clone();
                let lab = EntityId::lab(&flow.lab);
                let specimen = self.specimen(&prescription.tests);
                let intake = self.intake();
                ctx.send(
                    lab,
                    Payload::LabVisit {
                        session,
                        prescription,
                        specimen,
                        intake,
                    },
                );
            }
            Payload::StoreRejected { session, reason } => {
                if self.submissions.remove(&session) {
                    return;
                }
                if self.lab_flow_session(session) {
                    self.abort(AbortReason::StoreRejected(reason), ctx);
                }
            }
            Payload::StoreNotification { session, slot } if from.is(EntityKind::AuthServer) => {
                if self
                    .flow
                    .as_ref()
                    .is_some_and(|f| matches!(f.stage, Stage::Visited(s) if s == session))
                {
                    ctx.send(EntityId::auth(), Payload::StoreRead { session, slot });
                }
            }
            Payload::StoreReadReply { session, item, .. } if self.lab_flow_session(session) => {
                self.on_pointer(item, ctx)
            }
            Payload::BlobReply { location, blob } if from.is(EntityKind::ResultStore) => {
                self.on_blob(location, blob, ctx)
            }
            Payload::HandoffAccepted { nonce } if from.is(EntityKind::Physician) => {
                let Some(flow) = self.flow.take() else { return };
                if flow.prescription.nonce != nonce {
                    self.flow = Some(flow);
                    return;
                }
                if let Some(subkey) = flow.subkey {
                    match self.pool.record_use(subkey.id) {
                        Ok(_) => ctx.signal(Signal::KeyUseRecorded {
                            subkey: subkey.id.to_string(),
                        }),
                        Err(e) => ctx.abort(AbortReason::Unexpected(e.to_string())),
                    }
                }
            }
            // The physician already reported why.
            Payload::HandoffRejected { .. } if from.is(EntityKind::Physician) => self.flow = None,

            Payload::SetConsent {
                researcher,
                study,
                share,
                bypass,
            } if from.is(EntityKind::Harness) => {
                self.consents.insert((researcher, study), Consent { share, bypass });
            }
            Payload::ForwardedResearchRequest { researcher, study } if from.is(EntityKind::Physician) => {
                let Some(consent) = self.consents.get(&(researcher.clone(), study.clone())).cloned() else {
                    return;
                };
                if consent.bypass {
                    let target = EntityId::researcher(&researcher);
                    let Some(key) = ctx.pki().encryption(&target) else { return };
                    let body = self.submission(&consent);
                    let envelope = seal(&body, &key, None, &mut self.rng);
                    ctx.send(target, Payload::DirectSubmission { study, envelope });
                } else {
                    ctx.send(EntityId::auth(), Payload::VerifyResearcher { researcher, study });
                }
            }
            Payload::ResearchRefused { study, .. } => ctx.signal(Signal::ResearchRefused { study }),
            Payload::ResearchChannel {
                researcher,
                study,
                session,
                anonymizer_key,
            } if from.is(EntityKind::AuthServer) => {
                let Some(consent) = self.consents.get(&(researcher.clone(), study.clone())).cloned() else {
                    return;
                };
                let body = self.submission(&consent);
                let envelope = seal(&body, &anonymizer_key, None, &mut self.rng);
                self.submissions.insert(session);
                ctx.send(
                    EntityId::auth(),
                    Payload::StoreWrite {
                        session,
                        item: StoreItem::Sealed(envelope),
                    },
                );
            }

            Payload::DepositEmergency if from.is(EntityKind::Harness) => {
                let keys = self.contact.as_ref().and_then(|c| {
                    let pki = ctx.pki();
                    Some((pki.verifying(c)?, pki.encryption(c)?))
                });
                let Some((contact_vk, contact_ek)) = keys else {
                    ctx.signal(Signal::EmergencyDepositRejected);
                    return;
                };
                let snapshot = serde_json::to_vec(&self.vault.record().fields()).expect("fields serialize");
                let envelope = seal(&snapshot, &contact_ek, Some(&self.identity), &mut self.rng);
                ctx.send(
                    EntityId::emergency_server(),
                    Payload::EmergencyDeposit {
                        handle: self.emergency_handle.clone(),
                        envelope,
                        contact: contact_vk,
                    },
                );
            }
            Payload::EmergencyDeposited { version, .. } if from.is(EntityKind::EmergencyServer) => {
                ctx.signal(Signal::EmergencyDeposited { version })
            }
            Payload::EmergencyDepositRejected { .. } if from.is(EntityKind::EmergencyServer) => {
                ctx.signal(Signal::EmergencyDepositRejected)
            }
            Payload::EmergencyNotice { flag_raised, .. } if from.is(EntityKind::EmergencyServer) => {
                self.notices += 1;
                ctx.signal(Signal::EmergencyNoticeReceived { flag_raised });
            }
            _ => {}
        }
    }

    fn audit(&self, audit: &mut Audit) {
        let me = self.id.clone();
        audit.pools.push(PoolAudit {
            patient: me.clone(),
            max_use_count: self.pool.max_use_count(),
            public_threshold: self.pool.params().public_threshold,
            total_use_count: self.pool.total_use_count(),
            recorded_uses: self.pool.recorded_uses(),
            active_subkeys: self.pool.active_subkeys().count(),
        });
        audit.notices_received.insert(me.clone(), self.notices);
        audit.quarantined.insert(me, self.vault.quarantined().len());
    }
}
