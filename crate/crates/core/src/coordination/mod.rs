//! Directory servers, the authorization broker and its temp stores.

mod broker;
mod node;
mod store;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::crypto::{EncryptionKey, VerifyingKey};

pub use broker::{Broker, ResearchChannel};
pub use node::{AuthServerNode, DirectoryNode};
pub use store::{Access, Role, StoreError, StoreItem, StoreOp, StoreOpKind, StorePurpose, StoreSummary, TempStore};

/// `DirectoryID#EntryID`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DirectoryRef {
    pub directory_id: String,
    pub entry_id: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("`{0}` is not of the form DirectoryID#EntryID")]
pub struct ParseRefError(pub String);

impl DirectoryRef {
    pub fn new(directory_id: impl Into<String>, entry_id: impl Into<String>) -> Self {
        Self {
            directory_id: directory_id.into(),
            entry_id: entry_id.into(),
        }
    }
}

impl FromStr for DirectoryRef {
    type Err = ParseRefError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ParseRefError(s.to_string());
        let (dir, entry) = s.split_once('#').ok_or_else(bad)?;
        let ok = |part: &str| {
            !part.is_empty() && !part.contains('#') && part.chars().all(|c| !c.is_whitespace())
        };
        if !ok(dir) || !ok(entry) {
            return Err(bad());
        }
        Ok(Self::new(dir, entry))
    }
}

impl fmt::Display for DirectoryRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.directory_id, self.entry_id)
    }
}

impl Serialize for DirectoryRef {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DirectoryRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Lab,
    Researcher,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectoryEntry {
    pub reference: DirectoryRef,
    pub kind: EntryKind,
    /// Test types for labs, study descriptors for researchers.
    pub capabilities: BTreeSet<String>,
    pub public_key: VerifyingKey,
    pub encryption_key: Option<EncryptionKey>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CoordinationError {
    #[error("{0} is already registered")]
    DuplicateEntry(DirectoryRef),
    #[error("prescription signature does not verify")]
    BadPrescription,
    #[error("prescription was not issued by a registered physician")]
    UnregisteredPhysician,
    #[error("prescription nonce was already used")]
    ReplayedPrescription,
    #[error("verification failed: {0:?}")]
    NotVerified(Verification),
    #[error("no temp store for session {0}")]
    UnknownSession(SessionId),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Outcome of asking a directory about an entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verification {
    Verified,
    UnknownDirectory,
    UnknownEntry,
    KindMismatch,
    MissingCapability(BTreeSet<String>),
}

impl Verification {
    pub fn is_verified(&self) -> bool {
        *self == Verification::Verified
    }
}

/// One registry, holding entries whose refs share its directory id.
#[derive(Debug, Clone, Default)]
pub struct Directory {
    id: String,
    entries: BTreeMap<String, DirectoryEntry>,
}

impl Directory {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            entries: BTreeMap::new(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn register_entry(&mut self, entry: DirectoryEntry) -> Result<DirectoryRef, CoordinationError> {
        let r = entry.reference.clone();
        assert_eq!(r.directory_id, self.id, "entry belongs to another directory");
        if self.entries.contains_key(&r.entry_id) {
            return Err(CoordinationError::DuplicateEntry(r));
        }
        self.entries.insert(r.entry_id.clone(), entry);
        Ok(r)
    }

    pub fn get(&self, entry_id: &str) -> Option<&DirectoryEntry> {
        self.entries.get(entry_id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &DirectoryEntry> {
        self.entries.values()
    }

    fn check(&self, entry_id: &str, kind: EntryKind, needs: &BTreeSet<String>) -> Verification {
        let Some(entry) = self.entries.get(entry_id) else {
            return Verification::UnknownEntry;
        };
        if entry.kind != kind {
            return Verification::KindMismatch;
        }
        let missing: BTreeSet<String> = needs.difference(&entry.capabilities).cloned().collect();
        if missing.is_empty() {
            Verification::Verified
        } else {
            Verification::MissingCapability(missing)
        }
    }

    pub fn verify_lab(&self, entry_id: &str, tests: &BTreeSet<String>) -> Verification {
        self.check(entry_id, EntryKind::Lab, tests)
    }

    pub fn verify_researcher(&self, entry_id: &str, study: &str) -> Verification {
        self.check(entry_id, EntryKind::Researcher, &BTreeSet::from([study.to_string()]))
    }
}

/// All directories known to the broker, keyed by directory id.
#[derive(Debug, Clone, Default)]
pub struct DirectoryRegistry {
    directories: BTreeMap<String, Directory>,
}

impl DirectoryRegistry {
    pub fn register_entry(&mut self, entry: DirectoryEntry) -> Result<DirectoryRef, CoordinationError> {
        let id = entry.reference.directory_id.clone();
        self.directories
            .entry(id.clone())
            .or_insert_with(|| Directory::new(id))
            .register_entry(entry)
    }

    pub fn directory(&self, id: &str) -> Option<&Directory> {
        self.directories.get(id)
    }

    pub fn directories(&self) -> impl Iterator<Item = &Directory> {
        self.directories.values()
    }

    pub fn lookup(&self, r: &DirectoryRef) -> Option<&DirectoryEntry> {
        self.directories.get(&r.directory_id)?.get(&r.entry_id)
    }

    pub fn verify_lab(&self, r: &DirectoryRef, tests: &BTreeSet<String>) -> Verification {
        match self.directories.get(&r.directory_id) {
            None => Verification::UnknownDirectory,
            Some(d) => d.verify_lab(&r.entry_id, tests),
        }
    }

    pub fn verify_researcher(&self, r: &DirectoryRef, study: &str) -> Verification {
        match self.directories.get(&r.directory_id) {
            None => Verification::UnknownDirectory,
            Some(d) => d.verify_researcher(&r.entry_id, study),
        }
    }
}

/// 128-bit random session identifier, rendered as hex.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SessionId([u8; 16]);

impl SessionId {
    pub fn from_rng<R: RngCore>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 16];
        rng.fill_bytes(&mut bytes);
        Self(bytes)
    }

    pub fn from_bytes(bytes: [u8; 16]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SessionId({self})")
    }
}

impl FromStr for SessionId {
    type Err = hex::FromHexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut bytes = [0u8; 16];
        hex::decode_to_slice(s, &mut bytes)?;
        Ok(Self(bytes))
    }
}

impl Serialize for SessionId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SessionId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::generate_identity;

    fn lab(r: &str, tests: &[&str]) -> DirectoryEntry {
        DirectoryEntry {
            reference: r.parse().unwrap(),
            kind: EntryKind::Lab,
            capabilities: tests.iter().map(|t| t.to_string()).collect(),
            public_key: generate_identity(1, "lab").public(),
            encryption_key: None,
        }
    }

    fn tests(names: &[&str]) -> BTreeSet<String> {
        names.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn refs_round_trip() {
        let r: DirectoryRef = "D1#L7".parse().unwrap();
        assert_eq!(r, DirectoryRef::new("D1", "L7"));
        assert_eq!(r.to_string(), "D1#L7");
        assert_eq!(r.to_string().matches('#').count(), 1);
        for bad in ["D1L7", "#L7", "D1#", "D1#L#x", "D 1#L7"] {
            assert!(bad.parse::<DirectoryRef>().is_err(), "{bad}");
        }
    }

    #[test]
    fn registration_and_duplicates() {
        let mut reg = DirectoryRegistry::default();
        let r = reg.register_entry(lab("D1#L7", &["blood_panel"])).unwrap();
        assert_eq!(r.to_string(), "D1#L7");
        assert!(reg.lookup(&r).is_some());
        assert_eq!(
            reg.register_entry(lab("D1#L7", &["xray"])),
            Err(CoordinationError::DuplicateEntry(r))
        );
        let mut researcher = lab("D1#R1", &["asthma"]);
        researcher.kind = EntryKind::Researcher;
        let rr = reg.register_entry(researcher).unwrap();
        assert_eq!(reg.lookup(&rr).unwrap().kind, EntryKind::Researcher);
    }

    #[test]
    fn lab_verification_outcomes() {
        let mut reg = DirectoryRegistry::default();
        reg.register_entry(lab("D1#L1", &["blood_panel", "xray"])).unwrap();
        let r: DirectoryRef = "D1#L1".parse().unwrap();
        assert!(reg.verify_lab(&r, &tests(&["blood_panel"])).is_verified());
        assert_eq!(
            reg.verify_lab(&r, &tests(&["mri"])),
            Verification::MissingCapability(tests(&["mri"]))
        );
        assert_eq!(
            reg.verify_lab(&"D9#L1".parse().unwrap(), &tests(&["xray"])),
            Verification::UnknownDirectory
        );
        assert_eq!(
            reg.verify_lab(&"D1#L2".parse().unwrap(), &tests(&["xray"])),
            Verification::UnknownEntry
        );
    }

    #[test]
    fn researcher_verification_outcomes() {
        let mut reg = DirectoryRegistry::default();
        reg.register_entry(lab("D1#L1", &["xray"])).unwrap();
        let mut researcher = lab("D1#R1", &["asthma"]);
        researcher.kind = EntryKind::Researcher;
        reg.register_entry(researcher).unwrap();
        assert!(reg.verify_researcher(&"D1#R1".parse().unwrap(), "asthma").is_verified());
        assert_eq!(
            reg.verify_researcher(&"D1#L1".parse().unwrap(), "asthma"),
            Verification::KindMismatch
        );
        assert_eq!(
            reg.verify_researcher(&"D1#R9".parse().unwrap(), "asthma"),
            Verification::UnknownEntry
        );
    }

    #[test]
    fn session_ids_render_as_hex() {
        let mut rng = crate::rng::seeded(1);
        let s = SessionId::from_rng(&mut rng);
        let text = s.to_string();
        assert_eq!(text.len(), 32);
        assert_eq!(text.parse::<SessionId>().unwrap(), s);
        assert_ne!(SessionId::from_rng(&mut rng), s);
    }
}
