use std::collections::BTreeMap;

use crate::crypto::{digest_hex, open, symmetric_decrypt, EncryptionKeypair, SealedEnvelope, SigningIdentity};
use crate::protocol::messages::{AbortReason, Blob, HandoffBody, Payload};
use crate::protocol::prescription::issue_prescription;
use crate::protocol::record::{ExplicitIds, Fields, NAME, NATIONAL_ID};
use crate::protocol::result::{BlobLocation, ResultFile, ResultPointer};
use crate::rng::SimRng;
use crate::sim::{Context, EntityId, EntityKind, Node, ObservedItem, Scope, Signal, Token};

#[derive(Debug, Clone)]
struct Consult {
    patient: EntityId,
    scope: Scope,
    /// Set once a handoff names this consult.
    pointer: Option<ResultPointer>,
}

/// A physician: knows its patients by name and national id, orders tests
/// and receives results from the patient.
pub struct PhysicianNode {
    identity: SigningIdentity,
    keys: EncryptionKeypair,
    rng: SimRng,
    roster: Vec<EntityId>,
    consults: BTreeMap<Vec<u8>, Consult>,
}

impl PhysicianNode {
    pub fn new(identity: SigningIdentity, keys: EncryptionKeypair, roster: Vec<EntityId>, rng: SimRng) -> Self {
        Self {
            identity,
            keys,
            rng,
            roster,
            consults: BTreeMap::new(),
        }
    }

    fn reject(&mut self, patient: &EntityId, reason: AbortReason, ctx: &mut Context<'_>) {
        ctx.send(
            patient.clone(),
            Payload::HandoffRejected {
                reason: reason.to_string(),
            },
        );
        ctx.abort(reason);
    }

    fn on_handoff(&mut self, from: &EntityId, envelope: SealedEnvelope, ctx: &mut Context<'_>) {
        let opened = match open(&envelope, &self.keys.secret) {
            Ok(o) => o,
            Err(e) => return self.reject(from, AbortReason::HandoffUnreadable(e.to_string()), ctx),
        };
        let sender_key = ctx.pki().verifying(from);
        if opened.verified_signer().is_none() || opened.verified_signer() != sender_key {
            return self.reject(from, AbortReason::HandoffSignatureInvalid, ctx);
        }
        let Ok(body) = serde_json::from_slice::<HandoffBody>(&opened.plaintext) else {
            return self.reject(from, AbortReason::HandoffUnreadable("malformed body".into()), ctx);
        };
        let known = self
            .consults
            .get(&body.prescription_nonce)
            .is_some_and(|c| &c.patient == from && c.pointer.is_none());
        if !known {
            return self.reject(from, AbortReason::UnknownConsult, ctx);
        }
        let from_lab = ctx
            .pki()
            .key_is(&body.pointer.lab_signature.signer_public, EntityKind::Lab);
        if !body.pointer.verifies() || !from_lab {
            return self.reject(from, AbortReason::PointerNotFromLab, ctx);
        }
        ctx.send(
            EntityId::result_store(),
            Payload::BlobGet {
                location: body.pointer.location.clone(),
            },
        );
        if let Some(c) = self.consults.get_mut(&body.prescription_nonce) {
            c.pointer = Some(body.pointer);
        }
    }

    fn on_blob(&mut self, location: BlobLocation, blob: Option<Blob>, ctx: &mut Context<'_>) {
        let Some((nonce, consult)) = self
            .consults
            .iter()
            .find(|(_, c)| c.pointer.as_ref().is_some_and(|p| p.location == location))
            .map(|(n, c)| (n.clone(), c.clone()))
        else {
            return;
        };
        let pointer = consult.pointer.clone().expect("matched on pointer");
        let patient = consult.patient.clone();
        self.consults.remove(&nonce);

        let Some(Blob(ciphertext)) = blob else {
            return self.reject(&patient, AbortReason::BlobMissing, ctx);
        };
        if BlobLocation::of(&ciphertext) != location {
            return self.reject(&patient, AbortReason::BlobMismatch, ctx);
        }
        let Ok(bytes) = symmetric_decrypt(&pointer.symmetric_key, &ciphertext) else {
            return self.reject(&patient, AbortReason::ResultUnreadable, ctx);
        };
        let Some(file) = ResultFile::from_bytes(&bytes) else {
            return self.reject(&patient, AbortReason::ResultUnreadable, ctx);
        };
        if !file.verifies() || file.lab() != pointer.lab_signature.signer_public {
            return self.reject(&patient, AbortReason::ResultSignatureInvalid, ctx);
        }
        let digest = digest_hex(&bytes);
        ctx.disclose(
            "lab-result",
            ObservedItem::new(consult.scope).with_attributes(&file.measurements),
            digest.clone(),
        );
        ctx.signal(Signal::ResultDelivered { digest });
        ctx.send(patient, Payload::HandoffAccepted { nonce });
    }
}

impl Node for PhysicianNode {
    fn handle(&mut self, from: &EntityId, payload: Payload, ctx: &mut Context<'_>) {
        match payload {
            Payload::Consult { patient, ids, tests } if from.is(EntityKind::Harness) => {
                let Some(prescription) = issue_prescription(&self.identity, tests, &mut self.rng) else {
                    return ctx.abort(AbortReason::EmptyPrescription);
                };
                let scope = Scope::Isolated(format!("consult:{}", hex::encode(&prescription.nonce)));
                ctx.claim(scope.clone(), patient.clone());
                let ExplicitIds { name, national_id } = ids;
                let attributes: Fields = [(NAME.to_string(), name), (NATIONAL_ID.to_string(), national_id.clone())].into();
                let json = serde_json::to_vec(&attributes).expect("fields serialize");
                ctx.disclose(
                    "consult",
                    ObservedItem::new(scope.clone())
                        .with_id(Token::NationalId(national_id))
                        .with_attributes(&attributes),
                    digest_hex(&json),
                );
                self.consults.insert(
                    prescription.nonce.clone(),
                    Consult {
                        patient: patient.clone(),
                        scope,
                        pointer: None,
                    },
                );
                ctx.send(patient, Payload::PrescriptionIssued { prescription });
            }
            Payload::ResultHandoff { envelope } if from.is(EntityKind::Patient) => self.on_handoff(from, envelope, ctx),
            Payload::BlobReply { location, blob } if from.is(EntityKind::ResultStore) => self.on_blob(location, blob, ctx),
            Payload::ResearchRequest { researcher, study } if from.is(EntityKind::Researcher) => {
                for patient in &self.roster {
                    ctx.send(
                        patient.clone(),
                        Payload::ForwardedResearchRequest {
                            researcher: researcher.clone(),
                            study: study.clone(),
                        },
                    );
                }
            }
            _ => {}
        }
    }
}
