use std::collections::BTreeMap;

use crate::anonymizer::{AnonymizationPolicy, ReleaseError, SubmissionPool};
use crate::coordination::{DirectoryRef, SessionId, StoreItem};
use crate::crypto::{digest_hex, open, seal, EncryptionKeypair, SigningIdentity};
use crate::protocol::messages::Payload;
use crate::protocol::record::Fields;
use crate::rng::SimRng;
use crate::sim::audit::ReleaseAudit;
use crate::sim::{Audit, Context, EntityId, EntityKind, Node, ObservedItem, Scope, Signal};

#[derive(Debug)]
struct Study {
    researcher: DirectoryRef,
    study: String,
    pool: SubmissionPool,
    closed: bool,
    /// Released, or blocked for good.
    settled: bool,
}

/// The anonymizer entity: one submission pool per study channel.
pub struct AnonymizerNode {
    identity: SigningIdentity,
    keys: EncryptionKeypair,
    policy: AnonymizationPolicy,
    min_pool_size: usize,
    rng: SimRng,
    studies: BTreeMap<SessionId, Study>,
    released: Vec<ReleaseAudit>,
}

impl AnonymizerNode {
    pub fn new(
        identity: SigningIdentity,
        keys: EncryptionKeypair,
        policy: AnonymizationPolicy,
        min_pool_size: usize,
        rng: SimRng,
    ) -> Self {
        Self {
            identity,
            keys,
            policy,
            min_pool_size,
            rng,
            studies: BTreeMap::new(),
            released: Vec::new(),
        }
    }

    fn try_release(&mut self, session: SessionId, ctx: &mut Context<'_>) {
        let Some(study) = self.studies.get_mut(&session) else {
            return;
        };
        if !study.closed || study.settled {
            return;
        }
        let researcher = EntityId::researcher(&study.researcher);
        match study.pool.release_batch(&study.study, &mut self.rng) {
            Err(ReleaseError::TooSmall { size, .. }) => ctx.signal(Signal::ReleaseWithheld {
                study: study.study.clone(),
                pool: size,
            }),
            Err(ReleaseError::Infeasible) => {
                study.settled = true;
                ctx.signal(Signal::ReleaseBlocked {
                    study: study.study.clone(),
                });
                ctx.send(
                    EntityId::auth(),
                    Payload::ReleaseBlocked {
                        researcher: study.researcher.clone(),
                        study: study.study.clone(),
                    },
                );
            }
            Ok((release, included)) => {
                let Some(key) = ctx.pki().encryption(&researcher) else {
                    return;
                };
                study.settled = true;
                let body = serde_json::to_vec(&release).expect("release serializes");
                let envelope = seal(&body, &key, Some(&self.identity), &mut self.rng);
                ctx.send(
                    researcher.clone(),
                    Payload::ReleasedBatch {
                        study: study.study.clone(),
                        envelope,
                    },
                );
                self.released.push(ReleaseAudit {
                    researcher,
                    study: study.study.clone(),
                    included,
                    release,
                });
            }
        }
    }
}

impl Node for AnonymizerNode {
    fn handle(&mut self, from: &EntityId, payload: Payload, ctx: &mut Context<'_>) {
        match payload {
            Payload::OpenAnonymizerChannel {
                session,
                researcher,
                study,
            } if from.is(EntityKind::AuthServer) => {
                self.studies.entry(session).or_insert_with(|| Study {
                    researcher,
                    study,
                    pool: SubmissionPool::new(self.policy.clone(), self.min_pool_size),
                    closed: false,
                    settled: false,
                });
                ctx.send(
                    from.clone(),
                    Payload::AnonymizerChannelReady {
                        session,
                        key: self.keys.public,
                    },
                );
            }
            Payload::StoreNotification { session, slot } if self.studies.contains_key(&session) => {
                ctx.send(EntityId::auth(), Payload::StoreRead { session, slot });
            }
            Payload::StoreReadReply {
                session,
                slot,
                item: StoreItem::Sealed(envelope),
            } => {
                let Some(study) = self.studies.get_mut(&session) else {
                    return;
                };
                // Unreadable submissions are dropped; nobody else can read
                // them either.
                let Ok(opened) = open(&envelope, &self.keys.secret) else {
                    return;
                };
                let Ok(fields) = serde_json::from_slice::<Fields>(&opened.plaintext) else {
                    return;
                };
                let scope = Scope::Submission { session, slot };
                ctx.disclose(
                    "submission",
                    ObservedItem::new(scope.clone()).with_attributes(&fields),
                    digest_hex(&opened.plaintext),
                );
                study.pool.add(scope, fields);
                self.try_release(session, ctx);
            }
            Payload::CloseStudy { researcher, study } => {
                let found = self
                    .studies
                    .iter_mut()
                    .find(|(_, s)| s.researcher == researcher && s.study == study);
                match found {
                    Some((&session, s)) => {
                        s.closed = true;
                        self.try_release(session, ctx);
                    }
                    None => ctx.signal(Signal::ReleaseWithheld { study, pool: 0 }),
                }
            }
            _ => {}
        }
    }

    fn audit(&self, audit: &mut Audit) {
        audit.releases_sent.extend(self.released.iter().cloned());
    }
}
