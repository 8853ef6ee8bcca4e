//! Append-only, role-scoped shared locations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordination::{DirectoryRef, SessionId};
use crate::crypto::{EncryptionKey, SealedEnvelope};
use crate::sim::EntityId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Patient,
    Lab,
    Researcher,
    Anonymizer,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Access {
    pub read: bool,
    pub write: bool,
}

impl Access {
    pub const NONE: Access = Access { read: false, write: false };
    pub const READ: Access = Access { read: true, write: false };
    pub const WRITE: Access = Access { read: false, write: true };
    pub const READ_WRITE: Access = Access { read: true, write: true };
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoreItem {
    PublicKey(EncryptionKey),
    Sealed(SealedEnvelope),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StorePurpose {
    LabSession,
    Submissions { researcher: DirectoryRef, study: String },
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum StoreError {
    #[error("not a member of this store")]
    NotMember,
    #[error("role {role:?} may not {op}")]
    Forbidden { role: Role, op: String },
    #[error("slot {0} is empty")]
    EmptySlot(usize),
    #[error("no such store")]
    UnknownStore,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TempStore {
    session_id: SessionId,
    purpose: StorePurpose,
    slots: Vec<(Role, StoreItem)>,
    acl: BTreeMap<Role, Access>,
    members: BTreeMap<EntityId, Role>,
    created_by: EntityId,
}

impl TempStore {
    pub fn new(
        session_id: SessionId,
        purpose: StorePurpose,
        acl: BTreeMap<Role, Access>,
        created_by: EntityId,
    ) -> Self {
        Self {
            session_id,
            purpose,
            slots: Vec::new(),
            acl,
            members: BTreeMap::new(),
            created_by,
        }
    }

    pub fn session_id(&self) -> SessionId {
        self.session_id
    }

    pub fn purpose(&self) -> &StorePurpose {
        &self.purpose
    }

    pub fn created_by(&self) -> &EntityId {
        &self.created_by
    }

    pub fn acl(&self) -> &BTreeMap<Role, Access> {
        &self.acl
    }

    pub fn members(&self) -> &BTreeMap<EntityId, Role> {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn add_member(&mut self, entity: EntityId, role: Role) {
        self.members.insert(entity, role);
    }

    pub fn role_of(&self, entity: &EntityId) -> Option<Role> {
        self.members.get(entity).copied()
    }

    fn access(&self, role: Role) -> Access {
        self.acl.get(&role).copied().unwrap_or(Access::NONE)
    }

    /// Appends `item` on behalf of `role`; returns its slot index.
    pub fn store_write(&mut self, role: Role, item: StoreItem) -> Result<usize, StoreError> {
        if !self.access(role).write {
            return Err(StoreError::Forbidden {
                role,
                op: "write".into(),
            });
        }
        self.slots.push((role, item));
        Ok(self.slots.len() - 1)
    }

    pub fn store_read(&self, role: Role, slot: usize) -> Result<&StoreItem, StoreError> {
        if !self.access(role).read {
            return Err(StoreError::Forbidden {
                role,
                op: "read".into(),
            });
        }
        self.slots
            .get(slot)
            .map(|(_, item)| item)
            .ok_or(StoreError::EmptySlot(slot))
    }

    /// Who wrote `slot`.
    pub fn writer(&self, slot: usize) -> Option<Role> {
        self.slots.get(slot).map(|(r, _)| *r)
    }

    /// Members other than `except` allowed to read.
    pub fn readers_except(&self, except: &EntityId) -> Vec<EntityId> {
        self.members
            .iter()
            .filter(|(e, role)| *e != except && self.access(**role).read)
            .map(|(e, _)| e.clone())
            .collect()
    }

    /// Storage-level access for fault injection; bypasses the ACL.
    pub(crate) fn slot_mut(&mut self, slot: usize) -> Option<&mut StoreItem> {
        self.slots.get_mut(slot).map(|(_, item)| item)
    }

    pub fn summary(&self) -> StoreSummary {
        StoreSummary {
            session: self.session_id,
            purpose: self.purpose.clone(),
            acl: self.acl.clone(),
            members: self.members.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StoreSummary {
    pub session: SessionId,
    pub purpose: StorePurpose,
    pub acl: BTreeMap<Role, Access>,
    pub members: BTreeMap<EntityId, Role>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StoreOpKind {
    Read(usize),
    Write,
}

/// One attempted store operation, successful or not.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StoreOp {
    pub time: u64,
    pub entity: EntityId,
    pub role: Option<Role>,
    pub session: SessionId,
    pub op: StoreOpKind,
    pub outcome: Result<usize, StoreError>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::DecryptionKey;
    use crate::rng::seeded;

    fn lab_store() -> TempStore {
        let mut rng = seeded(5);
        TempStore::new(
            SessionId::from_rng(&mut rng),
            StorePurpose::LabSession,
            BTreeMap::from([(Role::Patient, Access::READ_WRITE), (Role::Lab, Access::READ_WRITE)]),
            EntityId::auth(),
        )
    }

    #[test]
    fn lab_reads_what_patient_wrote() {
        let mut store = lab_store();
        let key = DecryptionKey::from_rng(&mut seeded(6)).public();
        let slot = store.store_write(Role::Patient, StoreItem::PublicKey(key)).unwrap();
        assert_eq!(store.store_read(Role::Lab, slot), Ok(&StoreItem::PublicKey(key)));
        assert_eq!(store.writer(slot), Some(Role::Patient));
    }

    #[test]
    fn researcher_is_refused() {
        let mut store = lab_store();
        let key = DecryptionKey::from_rng(&mut seeded(6)).public();
        store.store_write(Role::Patient, StoreItem::PublicKey(key)).unwrap();
        assert!(matches!(
            store.store_read(Role::Researcher, 0),
            Err(StoreError::Forbidden { role: Role::Researcher, .. })
        ));
        assert!(store
            .store_write(Role::Researcher, StoreItem::PublicKey(key))
            .is_err());
        assert_eq!(store.len(), 1);
    }

    #[test]
    fn empty_slot_is_not_found() {
        let store = lab_store();
        assert_eq!(store.store_read(Role::Lab, 0), Err(StoreError::EmptySlot(0)));
    }

    #[test]
    fn slots_are_append_only() {
        let mut store = lab_store();
        let mut rng = seeded(7);
        let a = DecryptionKey::from_rng(&mut rng).public();
        let b = DecryptionKey::from_rng(&mut rng).public();
        assert_eq!(store.store_write(Role::Patient, StoreItem::PublicKey(a)), Ok(0));
        assert_eq!(store.store_write(Role::Lab, StoreItem::PublicKey(b)), Ok(1));
        assert_eq!(store.store_read(Role::Patient, 0), Ok(&StoreItem::PublicKey(a)));
    }
}
