//! Emergency snapshots: sealed to a designated contact, and every read
//! leaves a trace the patient hears about.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{SealedEnvelope, VerifyingKey};
use crate::sim::EntityId;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SnapshotHandle(pub String);

impl std::fmt::Display for SnapshotHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessLogEntry {
    pub accessor: VerifyingKey,
    pub time: u64,
    /// The accessor is not the designated contact, or could not prove it.
    pub flag_raised: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmergencySnapshot {
    /// Every deposit, oldest first; the last is current.
    pub history: Vec<SealedEnvelope>,
    pub contact: VerifyingKey,
    pub access_log: Vec<AccessLogEntry>,
    pub patient_notify_channel: EntityId,
}

impl EmergencySnapshot {
    pub fn current(&self) -> &SealedEnvelope {
        self.history.last().expect("a snapshot has at least one deposit")
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EmergencyError {
    #[error("no emergency contact is designated")]
    NoContact,
    #[error("handle belongs to another patient")]
    HandleTaken,
    #[error("no snapshot under this handle")]
    UnknownHandle,
}

/// A notification owed to a patient, produced together with every read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessNotice {
    pub patient: EntityId,
    pub entry: AccessLogEntry,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessOutcome {
    pub envelope: SealedEnvelope,
    pub notice: AccessNotice,
}

/// The server's ciphertext-only storage.
#[derive(Debug, Clone, Default)]
pub struct EmergencyStore {
    snapshots: BTreeMap<SnapshotHandle, EmergencySnapshot>,
}

impl EmergencyStore {
    pub fn snapshot(&self, handle: &SnapshotHandle) -> Option<&EmergencySnapshot> {
        self.snapshots.get(handle)
    }

    pub fn snapshots(&self) -> impl Iterator<Item = (&SnapshotHandle, &EmergencySnapshot)> {
        self.snapshots.iter()
    }

    /// Stores `envelope` as the current snapshot. Returns its version
    /// number (1 for the first deposit).
    pub fn emergency_deposit(
        &mut self,
        handle: SnapshotHandle,
        patient: EntityId,
        envelope: SealedEnvelope,
        contact: Option<VerifyingKey>,
    ) -> Result<usize, EmergencyError> {
        let contact = contact.ok_or(EmergencyError::NoContact)?;
        let snap = self
            .snapshots
            .entry(handle)
            .or_insert_with(|| EmergencySnapshot {
                history: Vec::new(),
                contact,
                access_log: Vec::new(),
                patient_notify_channel: patient.clone(),
            });
        if snap.patient_notify_channel != patient {
            return Err(EmergencyError::HandleTaken);
        }
        snap.contact = contact;
        snap.history.push(envelope);
        Ok(snap.history.len())
    }

    /// Hands out the current ciphertext. The log entry and the notice are
    /// produced in the same step; there is no other read path.
    pub fn emergency_access(
        &mut self,
        handle: &SnapshotHandle,
        accessor: VerifyingKey,
        authenticated: bool,
        time: u64,
    ) -> Result<AccessOutcome, EmergencyError> {
        let snap = self
            .snapshots
            .get_mut(handle)
            .ok_or(EmergencyError::UnknownHandle)?;
        let entry = AccessLogEntry {
            accessor,
            time,
            flag_raised: !(authenticated && accessor == snap.contact),
        };
        snap.access_log.push(entry.clone());
        Ok(AccessOutcome {
            envelope: snap.current().clone(),
            notice: AccessNotice {
                patient: snap.patient_notify_channel.clone(),
                entry,
            },
        })
    }
}

/// Bytes an accessor signs to request a snapshot.
pub fn access_request_bytes(handle: &SnapshotHandle) -> Vec<u8> {
    let mut out = b"dapriv/emergency-read/v1".to_vec();
    out.extend_from_slice(handle.0.as_bytes());
    out
}
