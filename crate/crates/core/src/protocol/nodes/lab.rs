use std::collections::{BTreeMap, BTreeSet};

use crate::coordination::{SessionId, StoreItem};
use crate::crypto::{digest_hex, seal, symmetric_encrypt, EncryptionKey, SigningIdentity, SymmetricKey};
use crate::protocol::messages::{AbortReason, Blob, Payload};
use crate::protocol::record::Fields;
use crate::protocol::result::{BlobLocation, ResultFile, ResultPointer};
use crate::rng::SimRng;
use crate::sim::{Context, EntityId, EntityKind, Node, ObservedItem, Scope, Signal};

/// Recorded when a test has no specimen to measure.
pub const NOT_MEASURED: &str = "not-measured";

#[derive(Debug, Clone)]
struct LabSession {
    tests: BTreeSet<String>,
    specimen: Option<Fields>,
    done: bool,
}

/// A testing laboratory. Learns the session id, the specimen and whatever
/// the patient hands over at intake.
pub struct LabNode {
    identity: SigningIdentity,
    rng: SimRng,
    sessions: BTreeMap<SessionId, LabSession>,
}

impl LabNode {
    pub fn new(identity: SigningIdentity, rng: SimRng) -> Self {
        Self {
            identity,
            rng,
            sessions: BTreeMap::new(),
        }
    }

    fn issue(&mut self, session: SessionId, key: EncryptionKey, ctx: &mut Context<'_>) {
        let Some(state) = self.sessions.get_mut(&session) else { return };
        if state.done {
            return;
        }
        let Some(specimen) = state.specimen.take() else { return };
        state.done = true;
        let measurements: Fields = state
            .tests
            .iter()
            .map(|t| {
                let value = specimen.get(t).cloned().unwrap_or_else(|| NOT_MEASURED.to_string());
                (t.clone(), value)
            })
            .collect();
        let file = ResultFile::issue(measurements, &self.identity);
        let bytes = file.to_bytes();
        let symmetric_key = SymmetricKey::from_rng(&mut self.rng);
        let ciphertext = symmetric_encrypt(&symmetric_key, &bytes, &mut self.rng);
        let location = BlobLocation::of(&ciphertext);
        ctx.send(
            EntityId::result_store(),
            Payload::BlobPut {
                location: location.clone(),
                blob: Blob(ciphertext),
            },
        );
        let pointer = ResultPointer::issue(location, symmetric_key, &self.identity);
        let envelope = seal(&pointer.to_bytes(), &key, Some(&self.identity), &mut self.rng);
        ctx.send(
            EntityId::auth(),
            Payload::StoreWrite {
                session,
                item: StoreItem::Sealed(envelope),
            },
        );
        let digest = digest_hex(&bytes);
        ctx.disclose(
            "lab-result",
            ObservedItem::new(Scope::Session(session)).with_attributes(&file.measurements),
            digest.clone(),
        );
        ctx.signal(Signal::ResultIssued { digest });
    }
}

impl Node for LabNode {
    fn handle(&mut self, from: &EntityId, payload: Payload, ctx: &mut Context<'_>) {
        match payload {
            Payload::SessionOpened { session, tests } if from.is(EntityKind::AuthServer) => {
                self.sessions.insert(
                    session,
                    LabSession {
                        tests,
                        specimen: None,
                        done: false,
                    },
                );
            }
            Payload::LabVisit {
                session,
                prescription,
                specimen,
                ..
            } if from.is(EntityKind::Patient) => {
                let Some(state) = self.sessions.get_mut(&session) else {
                    return ctx.abort(AbortReason::UnknownSession);
                };
                let valid = matches!(prescription.verify(), Ok(true))
                    && ctx.pki().key_is(&prescription.physician_pub, EntityKind::Physician)
                    && prescription.tests == state.tests;
                if !valid {
                    state.done = true;
                    return ctx.abort(AbortReason::LabPrescriptionInvalid);
                }
                state.specimen = Some(specimen);
                ctx.send(EntityId::auth(), Payload::StoreRead { session, slot: 0 });
            }
            Payload::StoreReadReply {
                session,
                slot: 0,
                item: StoreItem::PublicKey(key),
            } if from.is(EntityKind::AuthServer) => self.issue(session, key, ctx),
            Payload::StoreRejected { session, reason } if self.sessions.contains_key(&session) => {
                ctx.abort(AbortReason::StoreRejected(reason))
            }
            _ => {}
        }
    }
}
