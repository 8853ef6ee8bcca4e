use std::collections::BTreeMap;

use crate::crypto::verify;
use crate::protocol::emergency::{access_request_bytes, EmergencyStore};
use crate::protocol::messages::{flip_bit, Blob, Payload};
use crate::protocol::result::BlobLocation;
use crate::sim::audit::EmergencyAudit;
use crate::sim::{Audit, Context, EntityId, EntityKind, Node, StorageFault};

/// Content-addressed ciphertext storage shared by all labs.
#[derive(Default)]
pub struct ResultStoreNode {
    blobs: BTreeMap<BlobLocation, Vec<u8>>,
}

impl ResultStoreNode {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Node for ResultStoreNode {
    fn handle(&mut self, from: &EntityId, payload: Payload, ctx: &mut Context<'_>) {
        match payload {
            Payload::BlobPut { location, blob } if from.is(EntityKind::Lab) => {
                self.blobs.insert(location, blob.0);
            }
            Payload::BlobGet { location } => {
                let blob = self.blobs.get(&location).cloned().map(Blob);
                ctx.send(from.clone(), Payload::BlobReply { location, blob });
            }
            _ => {}
        }
    }

    fn apply_fault(&mut self, fault: &StorageFault, trigger: &Payload) -> bool {
        match (fault, trigger) {
            (StorageFault::FlipBlobBit, Payload::BlobPut { location, .. }) => {
                self.blobs.get_mut(location).is_some_and(|b| flip_bit(b))
            }
            _ => false,
        }
    }
}

/// Holds sealed emergency snapshots. Every read is logged and the owner is
/// told about it in the same step.
#[derive(Default)]
pub struct EmergencyServerNode {
    store: EmergencyStore,
}

impl EmergencyServerNode {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Node for EmergencyServerNode {
    fn handle(&mut self, from: &EntityId, payload: Payload, ctx: &mut Context<'_>) {
        match payload {
            Payload::EmergencyDeposit {
                handle,
                envelope,
                contact,
            } if from.is(EntityKind::Patient) => {
                if !ctx.pki().key_is(&contact, EntityKind::EmergencyContact) {
                    ctx.send(
                        from.clone(),
                        Payload::EmergencyDepositRejected {
                            handle,
                            reason: "contact is not a registered emergency contact".into(),
                        },
                    );
                    return;
                }
                let reply = match self
                    .store
                    .emergency_deposit(handle.clone(), from.clone(), envelope, Some(contact))
                {
                    Ok(version) => Payload::EmergencyDeposited { handle, version },
                    Err(e) => Payload::EmergencyDepositRejected {
                        handle,
                        reason: e.to_string(),
                    },
                };
                ctx.send(from.clone(), reply);
            }
            Payload::EmergencyRead {
                handle,
                accessor,
                signature,
            } => {
                let authenticated = signature.signer_public == accessor
                    && matches!(verify(&access_request_bytes(&handle), &signature, &accessor), Ok(true));
                match self.store.emergency_access(&handle, accessor, authenticated, ctx.now()) {
                    Ok(outcome) => {
                        ctx.send(
                            from.clone(),
                            Payload::EmergencyReadReply {
                                handle: handle.clone(),
                                envelope: Some(outcome.envelope),
                            },
                        );
                        ctx.send(
                            outcome.notice.patient,
                            Payload::EmergencyNotice {
                                handle,
                                accessor: outcome.notice.entry.accessor,
                                flag_raised: outcome.notice.entry.flag_raised,
                                time: outcome.notice.entry.time,
                            },
                        );
                    }
                    Err(_) => ctx.send(from.clone(), Payload::EmergencyReadReply { handle, envelope: None }),
                }
            }
            _ => {}
        }
    }

    fn audit(&self, audit: &mut Audit) {
        audit.emergency.extend(self.store.snapshots().map(|(handle, snap)| EmergencyAudit {
            patient: snap.patient_notify_channel.clone(),
            handle: handle.to_string(),
            versions: snap.history.len(),
            access_log: snap.access_log.clone(),
        }));
    }
}
