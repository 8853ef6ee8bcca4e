//! The authorization broker's state, independent of messaging.

use std::collections::{BTreeMap, BTreeSet};

use crate::coordination::{
    Access, CoordinationError, DirectoryRef, DirectoryRegistry, Role, SessionId, StoreError, StoreItem, StoreOp,
    StoreOpKind, StorePurpose, TempStore, Verification,
};
use crate::crypto::{EncryptionKey, VerifyingKey};
use crate::protocol::prescription::Prescription;
use crate::rng::SimRng;
use crate::sim::EntityId;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResearchChannel {
    pub session: SessionId,
    /// Known once the anonymizer has answered.
    pub anonymizer_key: Option<EncryptionKey>,
}

/// Holds temp stores and brokers identifiers and keys. Never holds
/// plaintext medical data.
#[derive(Debug, Clone)]
pub struct Broker {
    me: EntityId,
    stores: BTreeMap<SessionId, TempStore>,
    journal: Vec<StoreOp>,
    used_nonces: BTreeSet<Vec<u8>>,
    channels: BTreeMap<(DirectoryRef, String), ResearchChannel>,
    rng: SimRng,
}

impl Broker {
    pub fn new(me: EntityId, rng: SimRng) -> Self {
        Self {
            me,
            stores: BTreeMap::new(),
            journal: Vec::new(),
            used_nonces: BTreeSet::new(),
            channels: BTreeMap::new(),
            rng,
        }
    }

    pub fn stores(&self) -> impl Iterator<Item = &TempStore> {
        self.stores.values()
    }

    pub fn store(&self, session: &SessionId) -> Option<&TempStore> {
        self.stores.get(session)
    }

    pub(crate) fn store_mut(&mut self, session: &SessionId) -> Option<&mut TempStore> {
        self.stores.get_mut(session)
    }

    pub fn journal(&self) -> &[StoreOp] {
        &self.journal
    }

    fn fresh_session(&mut self) -> SessionId {
        loop {
            let id = SessionId::from_rng(&mut self.rng);
            if !self.stores.contains_key(&id) {
                return id;
            }
        }
    }

    /// Signature and issuer checks on a prescription presented by a patient.
    pub fn check_prescription(
        &self,
        prescription: &Prescription,
        is_physician: impl Fn(&VerifyingKey) -> bool,
    ) -> Result<(), CoordinationError> {
        if !matches!(prescription.verify(), Ok(true)) {
            return Err(CoordinationError::BadPrescription);
        }
        if !is_physician(&prescription.physician_pub) {
            return Err(CoordinationError::UnregisteredPhysician);
        }
        if self.used_nonces.contains(&prescription.nonce) {
            return Err(CoordinationError::ReplayedPrescription);
        }
        Ok(())
    }

    /// Creates the session store once the directory has vouched for the lab.
    /// The same id goes to patient and lab.
    pub fn open_lab_session(
        &mut self,
        prescription: &Prescription,
        verification: Verification,
        patient: EntityId,
        lab: EntityId,
    ) -> Result<SessionId, CoordinationError> {
        if !verification.is_verified() {
            return Err(CoordinationError::NotVerified(verification));
        }
        if !self.used_nonces.insert(prescription.nonce.clone()) {
            return Err(CoordinationError::ReplayedPrescription);
        }
        let session = self.fresh_session();
        let mut store = TempStore::new(
            session,
            StorePurpose::LabSession,
            BTreeMap::from([(Role::Patient, Access::READ_WRITE), (Role::Lab, Access::READ_WRITE)]),
            self.me.clone(),
        );
        store.add_member(patient, Role::Patient);
        store.add_member(lab, Role::Lab);
        self.stores.insert(session, store);
        Ok(session)
    }

    /// All of the lab-side authorization in one call, against a local
    /// registry.
    pub fn authorize_lab_session(
        &mut self,
        registry: &DirectoryRegistry,
        prescription: &Prescription,
        lab_ref: &DirectoryRef,
        patient: EntityId,
        lab: EntityId,
        is_physician: impl Fn(&VerifyingKey) -> bool,
    ) -> Result<SessionId, CoordinationError> {
        self.check_prescription(prescription, is_physician)?;
        let verdict = registry.verify_lab(lab_ref, &prescription.tests);
        self.open_lab_session(prescription, verdict, patient, lab)
    }

    /// The submission store for `(researcher, study)`, created on first use.
    /// Returns the channel and whether it was just created.
    pub fn research_channel(
        &mut self,
        researcher_ref: &DirectoryRef,
        study: &str,
        researcher: EntityId,
        anonymizer: EntityId,
    ) -> (ResearchChannel, bool) {
        let key = (researcher_ref.clone(), study.to_string());
        if let Some(ch) = self.channels.get(&key) {
            return (ch.clone(), false);
        }
        let session = self.fresh_session();
        let mut store = TempStore::new(
            session,
            StorePurpose::Submissions {
                researcher: researcher_ref.clone(),
                study: study.to_string(),
            },
            BTreeMap::from([
                (Role::Patient, Access::WRITE),
                (Role::Anonymizer, Access::READ),
                (Role::Researcher, Access::NONE),
            ]),
            self.me.clone(),
        );
        store.add_member(anonymizer, Role::Anonymizer);
        store.add_member(researcher, Role::Researcher);
        self.stores.insert(session, store);
        let ch = ResearchChannel {
            session,
            anonymizer_key: None,
        };
        self.channels.insert(key, ch.clone());
        (ch, true)
    }

    pub fn set_channel_key(&mut self, session: SessionId, key: EncryptionKey) -> bool {
        match self.channels.values_mut().find(|c| c.session == session) {
            Some(ch) => {
                ch.anonymizer_key = Some(key);
                true
            }
            None => false,
        }
    }

    pub fn channel_for(&self, session: SessionId) -> Option<(&DirectoryRef, &str, &ResearchChannel)> {
        self.channels
            .iter()
            .find(|(_, c)| c.session == session)
            .map(|((r, s), c)| (r, s.as_str(), c))
    }

    /// Research-side setup in one call: verifies the researcher, then hands
    /// back the anonymizer key and submission session.
    #[allow(clippy::too_many_arguments)]
    pub fn setup_research_channel(
        &mut self,
        registry: &DirectoryRegistry,
        researcher_ref: &DirectoryRef,
        study: &str,
        researcher: EntityId,
        anonymizer: EntityId,
        anonymizer_key: EncryptionKey,
    ) -> Result<(EncryptionKey, SessionId), CoordinationError> {
        let verdict = registry.verify_researcher(researcher_ref, study);
        if !verdict.is_verified() {
            return Err(CoordinationError::NotVerified(verdict));
        }
        let (ch, _) = self.research_channel(researcher_ref, study, researcher, anonymizer);
        self.set_channel_key(ch.session, anonymizer_key);
        Ok((anonymizer_key, ch.session))
    }

    pub fn admit(&mut self, session: SessionId, entity: EntityId, role: Role) -> Result<(), CoordinationError> {
        self.stores
            .get_mut(&session)
            .ok_or(CoordinationError::UnknownSession(session))?
            .add_member(entity, role);
        Ok(())
    }

    pub fn write(
        &mut self,
        time: u64,
        entity: &EntityId,
        session: SessionId,
        item: StoreItem,
    ) -> Result<usize, StoreError> {
        let (role, outcome) = match self.stores.get_mut(&session) {
            None => (None, Err(StoreError::UnknownStore)),
            Some(store) => match store.role_of(entity) {
                None => (None, Err(StoreError::NotMember)),
                Some(role) => (Some(role), store.store_write(role, item)),
            },
        };
        self.journal.push(StoreOp {
            time,
            entity: entity.clone(),
            role,
            session,
            op: StoreOpKind::Write,
            outcome: outcome.clone(),
        });
        outcome
    }

    pub fn read(
        &mut self,
        time: u64,
        entity: &EntityId,
        session: SessionId,
        slot: usize,
    ) -> Result<StoreItem, StoreError> {
        let (role, outcome) = match self.stores.get(&session) {
            None => (None, Err(StoreError::UnknownStore)),
            Some(store) => match store.role_of(entity) {
                None => (None, Err(StoreError::NotMember)),
                Some(role) => (Some(role), store.store_read(role, slot).cloned()),
            },
        };
        self.journal.push(StoreOp {
            time,
            entity: entity.clone(),
            role,
            session,
            op: StoreOpKind::Read(slot),
            outcome: outcome.as_ref().map(|_| slot).map_err(Clone::clone),
        });
        outcome
    }
}
