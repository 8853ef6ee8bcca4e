use crate::coordination::StoreItem;
use crate::crypto::{digest_hex, open, sign, EncryptionKeypair, SigningIdentity};
use crate::protocol::emergency::access_request_bytes;
use crate::protocol::messages::Payload;
use crate::protocol::record::{Fields, NATIONAL_ID};
use crate::sim::{Context, EntityId, EntityKind, Node, ObservedItem, Scope, Signal, Token};

/// Anyone who asks the emergency server for a snapshot: a designated
/// contact, or the intruder. The intruder also probes temp stores after a
/// tamper.
pub struct AccessorNode {
    identity: SigningIdentity,
    keys: EncryptionKeypair,
    /// The patient this entity is a contact for, if any.
    principal: Option<EntityId>,
}

impl AccessorNode {
    pub fn new(identity: SigningIdentity, keys: EncryptionKeypair, principal: Option<EntityId>) -> Self {
        Self {
            identity,
            keys,
            principal,
        }
    }

    fn disclose_fields(&self, label: &str, scope: Scope, plaintext: &[u8], ctx: &mut Context<'_>) -> bool {
        let Ok(fields) = serde_json::from_slice::<Fields>(plaintext) else {
            return false;
        };
        let mut item = ObservedItem::new(scope.clone()).with_attributes(&fields);
        if let Some(ssn) = fields.get(NATIONAL_ID) {
            item = item.with_id(Token::NationalId(ssn.clone()));
        }
        if let Some(p) = &self.principal {
            ctx.claim(scope, p.clone());
        }
        ctx.disclose(label, item, digest_hex(plaintext));
        true
    }
}

impl Node for AccessorNode {
    fn handle(&mut self, from: &EntityId, payload: Payload, ctx: &mut Context<'_>) {
        match payload {
            Payload::AccessEmergency { handle } if from.is(EntityKind::Harness) => {
                let signature = sign(&access_request_bytes(&handle), &self.identity);
                ctx.send(
                    EntityId::emergency_server(),
                    Payload::EmergencyRead {
                        handle,
                        accessor: self.identity.public(),
                        signature,
                    },
                );
            }
            Payload::EmergencyReadReply { handle, envelope } if from.is(EntityKind::EmergencyServer) => {
                let opened = envelope.and_then(|env| open(&env, &self.keys.secret).ok());
                let scope = Scope::Isolated(format!("emergency:{handle}:{}", ctx.now()));
                match opened {
                    Some(o) if self.disclose_fields("emergency-snapshot", scope, &o.plaintext, ctx) => {
                        ctx.signal(Signal::EmergencyOpened)
                    }
                    _ => ctx.signal(Signal::EmergencyOpenFailed),
                }
            }
            Payload::Probe { session } if from.is(EntityKind::Harness) => {
                ctx.send(EntityId::auth(), Payload::StoreRead { session, slot: 1 });
            }
            // Only reachable if an ACL check failed somewhere.
            Payload::StoreReadReply {
                session,
                slot,
                item: StoreItem::Sealed(env),
            } => {
                if let Ok(o) = open(&env, &self.keys.secret) {
                    let scope = Scope::Isolated(format!("intercepted:{session}:{slot}"));
                    ctx.disclose("intercepted", ObservedItem::new(scope), digest_hex(&o.plaintext));
                }
            }
            _ => {}
        }
    }
}
