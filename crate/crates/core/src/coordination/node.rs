use std::collections::{BTreeMap, BTreeSet};

use crate::coordination::{Broker, CoordinationError, Directory, DirectoryRef, Role, SessionId, StoreItem, Verification};
use crate::protocol::messages::{flip_bit, Payload, Requirement};
use crate::protocol::prescription::Prescription;
use crate::sim::{Audit, Context, EntityId, EntityKind, Node, StorageFault};

#[derive(Debug, Clone)]
enum Pending {
    Lab {
        patient: EntityId,
        prescription: Prescription,
        lab: DirectoryRef,
    },
    Research {
        patient: EntityId,
        researcher: DirectoryRef,
        study: String,
    },
}

/// The authorization server: brokers sessions and hosts the temp stores.
pub struct AuthServerNode {
    broker: Broker,
    pending: BTreeMap<u64, Pending>,
    next_request: u64,
    /// Patients admitted to a submission channel whose anonymizer key has
    /// not arrived yet.
    waiting: BTreeMap<SessionId, Vec<EntityId>>,
    blocked: BTreeSet<(DirectoryRef, String)>,
}

impl AuthServerNode {
    pub fn new(broker: Broker) -> Self {
        Self {
            broker,
            pending: BTreeMap::new(),
            next_request: 0,
            waiting: BTreeMap::new(),
            blocked: BTreeSet::new(),
        }
    }

    pub fn broker(&self) -> &Broker {
        &self.broker
    }

    /// Sends a verification request to the directory named in `entry`.
    /// Returns false when no such directory server exists.
    fn ask_directory(&mut self, entry: DirectoryRef, requirement: Requirement, pending: Pending, ctx: &mut Context<'_>) -> bool {
        let dir = EntityId::directory(&entry.directory_id);
        if !ctx.pki().contains(&dir) {
            return false;
        }
        let request = self.next_request;
        self.next_request += 1;
        self.pending.insert(request, pending);
        ctx.send(
            dir,
            Payload::VerifyEntry {
                request,
                entry,
                requirement,
            },
        );
        true
    }

    fn on_lab_verdict(
        &mut self,
        patient: EntityId,
        prescription: Prescription,
        lab: DirectoryRef,
        verdict: Verification,
        ctx: &mut Context<'_>,
    ) {
        let lab_id = EntityId::lab(&lab);
        match self
            .broker
            .open_lab_session(&prescription, verdict, patient.clone(), lab_id.clone())
        {
            Ok(session) => {
                ctx.send(patient, Payload::SessionGranted { session, lab });
                ctx.send(
                    lab_id,
                    Payload::SessionOpened {
                        session,
                        tests: prescription.tests,
                    },
                );
            }
            Err(e) => ctx.send(
                patient,
                Payload::SessionRefused {
                    lab,
                    reason: e.to_string(),
                },
            ),
        }
    }

    fn on_research_verdict(
        &mut self,
        patient: EntityId,
        researcher: DirectoryRef,
        study: String,
        verdict: Verification,
        ctx: &mut Context<'_>,
    ) {
        if !verdict.is_verified() || self.blocked.contains(&(researcher.clone(), study.clone())) {
            ctx.send(patient, Payload::ResearchRefused { researcher, study });
            return;
        }
        let (channel, created) = self.broker.research_channel(
            &researcher,
            &study,
            EntityId::researcher(&researcher),
            EntityId::anonymizer(),
        );
        self.broker
            .admit(channel.session, patient.clone(), Role::Patient)
            .expect("channel store was just looked up");
        match channel.anonymizer_key {
            Some(anonymizer_key) => ctx.send(
                patient,
                Payload::ResearchChannel {
                    researcher,
                    study,
                    session: channel.session,
                    anonymizer_key,
                },
            ),
            None => {
                self.waiting.entry(channel.session).or_default().push(patient);
                if created {
                    ctx.send(
                        EntityId::anonymizer(),
                        Payload::OpenAnonymizerChannel {
                            session: channel.session,
                            researcher,
                            study,
                        },
                    );
                }
            }
        }
    }
}

impl Node for AuthServerNode {
    fn handle(&mut self, from: &EntityId, payload: Payload, ctx: &mut Context<'_>) {
        match payload {
            Payload::AuthorizeLabSession { prescription, lab } if from.is(EntityKind::Patient) => {
                let pki = ctx.pki();
                let checked = self
                    .broker
                    .check_prescription(&prescription, |k| pki.key_is(k, EntityKind::Physician));
                if let Err(e) = checked {
                    ctx.send(
                        from.clone(),
                        Payload::SessionRefused {
                            lab,
                            reason: e.to_string(),
                        },
                    );
                    return;
                }
                let requirement = Requirement::Lab {
                    tests: prescription.tests.clone(),
                };
                let pending = Pending::Lab {
                    patient: from.clone(),
                    prescription,
                    lab: lab.clone(),
                };
                if !self.ask_directory(lab.clone(), requirement, pending, ctx) {
                    ctx.send(
                        from.clone(),
                        Payload::SessionRefused {
                            lab,
                            reason: CoordinationError::NotVerified(Verification::UnknownDirectory).to_string(),
                        },
                    );
                }
            }
            Payload::VerifyResearcher { researcher, study } if from.is(EntityKind::Patient) => {
                let requirement = Requirement::Researcher { study: study.clone() };
                let pending = Pending::Research {
                    patient: from.clone(),
                    researcher: researcher.clone(),
                    study: study.clone(),
                };
                if !self.ask_directory(researcher.clone(), requirement, pending, ctx) {
                    ctx.send(from.clone(), Payload::ResearchRefused { researcher, study });
                }
            }
            Payload::EntryVerdict { request, verdict } if from.is(EntityKind::Directory) => {
                match self.pending.remove(&request) {
                    Some(Pending::Lab {
                        patient,
                        prescription,
                        lab,
                    }) => self.on_lab_verdict(patient, prescription, lab, verdict, ctx),
                    Some(Pending::Research {
                        patient,
                        researcher,
                        study,
                    }) => self.on_research_verdict(patient, researcher, study, verdict, ctx),
                    None => {}
                }
            }
            Payload::AnonymizerChannelReady { session, key } if from.is(EntityKind::Anonymizer) => {
                if !self.broker.set_channel_key(session, key) {
                    return;
                }
                let Some((researcher, study, _)) = self.broker.channel_for(session) else {
                    return;
                };
                let (researcher, study) = (researcher.clone(), study.to_string());
                for patient in self.waiting.remove(&session).unwrap_or_default() {
                    ctx.send(
                        patient,
                        Payload::ResearchChannel {
                            researcher: researcher.clone(),
                            study: study.clone(),
                            session,
                            anonymizer_key: key,
                        },
                    );
                }
            }
            Payload::ReleaseBlocked { researcher, study } if from.is(EntityKind::Anonymizer) => {
                self.blocked.insert((researcher, study));
            }
            Payload::StoreWrite { session, item } => match self.broker.write(ctx.now(), from, session, item) {
                Ok(slot) => {
                    ctx.send(from.clone(), Payload::StoreWritten { session, slot });
                    let readers = self
                        .broker
                        .store(&session)
                        .map(|s| s.readers_except(from))
                        .unwrap_or_default();
                    for reader in readers {
                        ctx.send(reader, Payload::StoreNotification { session, slot });
                    }
                }
                Err(e) => ctx.send(
                    from.clone(),
                    Payload::StoreRejected {
                        session,
                        reason: e.to_string(),
                    },
                ),
            },
            Payload::StoreRead { session, slot } => match self.broker.read(ctx.now(), from, session, slot) {
                Ok(item) => ctx.send(from.clone(), Payload::StoreReadReply { session, slot, item }),
                Err(e) => ctx.send(
                    from.clone(),
                    Payload::StoreRejected {
                        session,
                        reason: e.to_string(),
                    },
                ),
            },
            _ => {}
        }
    }

    fn apply_fault(&mut self, fault: &StorageFault, trigger: &Payload) -> bool {
        let Some(session) = trigger.session() else {
            return false;
        };
        let Some(store) = self.broker.store_mut(&session) else {
            return false;
        };
        let Some(last) = store.len().checked_sub(1) else {
            return false;
        };
        match (fault, store.slot_mut(last)) {
            (StorageFault::SubstituteKey(key), Some(StoreItem::PublicKey(k))) => {
                *k = *key;
                true
            }
            (StorageFault::FlipSealedBit, Some(StoreItem::Sealed(env))) => flip_bit(&mut env.ciphertext),
            _ => false,
        }
    }

    fn audit(&self, audit: &mut Audit) {
        audit.store_ops.extend(self.broker.journal().iter().cloned());
        audit.stores.extend(self.broker.stores().map(|s| s.summary()));
    }
}

/// A directory server. Answers whether an entry exists with the required
/// kind and capabilities; knows nothing about patients.
pub struct DirectoryNode {
    directory: Directory,
}

impl DirectoryNode {
    pub fn new(directory: Directory) -> Self {
        Self { directory }
    }
}

impl Node for DirectoryNode {
    fn handle(&mut self, from: &EntityId, payload: Payload, ctx: &mut Context<'_>) {
        let Payload::VerifyEntry {
            request,
            entry,
            requirement,
        } = payload
        else {
            return;
        };
        let verdict = if entry.directory_id != self.directory.id() {
            Verification::UnknownDirectory
        } else {
            match requirement {
                Requirement::Lab { tests } => self.directory.verify_lab(&entry.entry_id, &tests),
                Requirement::Researcher { study } => self.directory.verify_researcher(&entry.entry_id, &study),
            }
        };
        ctx.send(from.clone(), Payload::EntryVerdict { request, verdict });
    }
}
