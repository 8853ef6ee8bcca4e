use crate::anonymizer::Release;
use crate::coordination::DirectoryRef;
use crate::crypto::{digest_hex, open, EncryptionKeypair};
use crate::protocol::messages::Payload;
use crate::protocol::record::Fields;
use crate::sim::{Audit, Context, EntityId, EntityKind, Node, ObservedItem, Scope, Signal};

/// A researcher. Only ever sees anonymized releases, or what a patient
/// chose to send it directly.
pub struct ResearcherNode {
    reference: DirectoryRef,
    keys: EncryptionKeypair,
    physicians: Vec<EntityId>,
    releases: Vec<Release>,
}

impl ResearcherNode {
    pub fn new(reference: DirectoryRef, keys: EncryptionKeypair, physicians: Vec<EntityId>) -> Self {
        Self {
            reference,
            keys,
            physicians,
            releases: Vec::new(),
        }
    }
}

impl Node for ResearcherNode {
    fn handle(&mut self, from: &EntityId, payload: Payload, ctx: &mut Context<'_>) {
        match payload {
            Payload::StartStudy { study } if from.is(EntityKind::Harness) => {
                for physician in &self.physicians {
                    ctx.send(
                        physician.clone(),
                        Payload::ResearchRequest {
                            researcher: self.reference.clone(),
                            study: study.clone(),
                        },
                    );
                }
            }
            Payload::ReleasedBatch { study, envelope } if from.is(EntityKind::Anonymizer) => {
                let Ok(opened) = open(&envelope, &self.keys.secret) else { return };
                let anonymizer = ctx.pki().verifying(&EntityId::anonymizer());
                if opened.verified_signer().is_none() || opened.verified_signer() != anonymizer {
                    return;
                }
                let Ok(release) = serde_json::from_slice::<Release>(&opened.plaintext) else {
                    return;
                };
                let n = self.releases.len();
                for (i, record) in release.records.iter().enumerate() {
                    let json = serde_json::to_vec(record).expect("fields serialize");
                    ctx.disclose(
                        "release",
                        ObservedItem::new(Scope::Isolated(format!("release:{study}:{n}:{i}"))).with_attributes(record),
                        digest_hex(&json),
                    );
                }
                ctx.signal(Signal::ReleaseReceived {
                    study,
                    records: release.records.len(),
                });
                self.releases.push(release);
            }
            Payload::DirectSubmission { study, envelope } if from.is(EntityKind::Patient) => {
                let tag = digest_hex(&envelope.ciphertext)[..16].to_string();
                let Ok(opened) = open(&envelope, &self.keys.secret) else { return };
                let Ok(fields) = serde_json::from_slice::<Fields>(&opened.plaintext) else {
                    return;
                };
                ctx.disclose(
                    "direct-submission",
                    ObservedItem::new(Scope::Isolated(format!("direct:{tag}"))).with_attributes(&fields),
                    digest_hex(&opened.plaintext),
                );
                ctx.signal(Signal::DirectSubmissionReceived { study });
            }
            _ => {}
        }
    }

    fn audit(&self, audit: &mut Audit) {
        let me = EntityId::researcher(&self.reference);
        audit
            .releases_received
            .extend(self.releases.iter().map(|r| (me.clone(), r.clone())));
    }
}
