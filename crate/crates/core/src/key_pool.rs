//! A patient's rotating key material.
//!
//! The pool holds several private keys, each of which has several public
//! subkeys. Every subkey is a child key derived from its parent, so the
//! parent alone is enough to open anything sealed to any of its subkeys,
//! including subkeys that have since been archived.
//!
//! Selection and use are separate steps: [`KeyPool::select_public_key`]
//! draws uniformly from the active subkeys without touching any counter,
//! and [`KeyPool::record_use`] is called once a session has completed. A
//! subkey is archived (and replaced) when its count reaches the public
//! threshold; a private key is archived together with all of its subkeys,
//! and replaced by a fresh private key, when its own count reaches the
//! private threshold.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{DecryptionKey, EncryptionKey};
use crate::rng::SimRng;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KeyPoolError {
    #[error("pool parameter `{0}` must be at least 1")]
    ZeroCount(&'static str),
    #[error("subkey {0} is archived and cannot be used")]
    ArchivedSubKey(SubKeyId),
    #[error("no subkey {0} in this pool")]
    UnknownSubKey(SubKeyId),
    #[error("public key was not minted by this pool")]
    NotFound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolParams {
    pub private_keys: u32,
    pub subkeys_per_private: u32,
    pub public_threshold: u32,
    pub private_threshold: u32,
}

impl Default for PoolParams {
    fn default() -> Self {
        Self {
            private_keys: 2,
            subkeys_per_private: 3,
            public_threshold: 5,
            private_threshold: 12,
        }
    }
}

impl PoolParams {
    pub fn validate(&self) -> Result<(), KeyPoolError> {
        let checks = [
            ("private_keys", self.private_keys),
            ("subkeys_per_private", self.subkeys_per_private),
            ("public_threshold", self.public_threshold),
            ("private_threshold", self.private_threshold),
        ];
        match checks.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(KeyPoolError::ZeroCount(name)),
            None => Ok(()),
        }
    }

    pub fn active_subkeys(&self) -> u32 {
        self.private_keys * self.subkeys_per_private
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PrivateKeyId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SubKeyId {
    pub private: PrivateKeyId,
    pub index: u32,
}

impl std::fmt::Display for SubKeyId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{}", self.private.0, self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyStatus {
    Active,
    Archived,
}

#[derive(Debug, Clone)]
pub struct SubKey {
    pub id: SubKeyId,
    pub public_key: EncryptionKey,
    pub use_count: u32,
    pub status: KeyStatus,
}

#[derive(Debug, Clone)]
pub struct PrivateKey {
    pub id: PrivateKeyId,
    secret: DecryptionKey,
    pub subkeys: Vec<SubKey>,
    pub use_count: u32,
    pub status: KeyStatus,
}

impl PrivateKey {
    fn mint(id: PrivateKeyId, secret: DecryptionKey, subkeys: u32) -> Self {
        let mut key = Self {
            id,
            secret,
            subkeys: Vec::new(),
            use_count: 0,
            status: KeyStatus::Active,
        };
        for _ in 0..subkeys {
            key.mint_subkey();
        }
        key
    }

    fn mint_subkey(&mut self) -> SubKeyId {
        let id = SubKeyId {
            private: self.id,
            index: self.subkeys.len() as u32,
        };
        self.subkeys.push(SubKey {
            id,
            public_key: self.secret.derive_child(id.index).public(),
            use_count: 0,
            status: KeyStatus::Active,
        });
        id
    }

    /// Decryption key for one of this key's subkeys.
    pub fn subkey_secret(&self, index: u32) -> DecryptionKey {
        self.secret.derive_child(index)
    }
}

/// A selected subkey: what the patient deposits for a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubKeyRef {
    pub id: SubKeyId,
    pub public_key: EncryptionKey,
}

/// What a call to [`KeyPool::record_use`] changed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RotationReport {
    pub archived_subkeys: Vec<SubKeyId>,
    pub minted_subkeys: Vec<SubKeyId>,
    pub archived_private: Option<PrivateKeyId>,
    pub minted_private: Option<PrivateKeyId>,
}

impl RotationReport {
    pub fn is_quiet(&self) -> bool {
        *self == RotationReport::default()
    }
}

#[derive(Debug, Clone)]
pub struct KeyPool {
    params: PoolParams,
    keys: Vec<PrivateKey>,
    index: BTreeMap<EncryptionKey, SubKeyId>,
    rng: SimRng,
    recorded_uses: u64,
}

/// Builds a pool of `params.private_keys` private keys with
/// `params.subkeys_per_private` subkeys each, all counters at zero.
pub fn create_pool(params: PoolParams, mut rng: SimRng) -> Result<KeyPool, KeyPoolError> {
    params.validate()?;
    let mut pool = KeyPool {
        params,
        keys: Vec::new(),
        index: BTreeMap::new(),
        rng: rng.clone(),
        recorded_uses: 0,
    };
    for _ in 0..params.private_keys {
        let secret = DecryptionKey::from_rng(&mut rng);
        pool.push_private(secret);
    }
    pool.rng = rng;
    Ok(pool)
}

impl KeyPool {
    fn push_private(&mut self, secret: DecryptionKey) -> PrivateKeyId {
        let id = PrivateKeyId(self.keys.len() as u32);
        let key = PrivateKey::mint(id, secret, self.params.subkeys_per_private);
        for sub in &key.subkeys {
            self.index.insert(sub.public_key, sub.id);
        }
        self.keys.push(key);
        id
    }

    pub fn params(&self) -> &PoolParams {
        &self.params
    }

    pub fn private_keys(&self) -> &[PrivateKey] {
        &self.keys
    }

    pub fn subkeys(&self) -> impl Iterator<Item = &SubKey> {
        self.keys.iter().flat_map(|k| k.subkeys.iter())
    }

    pub fn active_subkeys(&self) -> impl Iterator<Item = &SubKey> {
        self.keys
            .iter()
            .filter(|k| k.status == KeyStatus::Active)
            .flat_map(|k| k.subkeys.iter())
            .filter(|s| s.status == KeyStatus::Active)
    }

    pub fn subkey(&self, id: SubKeyId) -> Option<&SubKey> {
        self.keys
            .get(id.private.0 as usize)
            .and_then(|k| k.subkeys.get(id.index as usize))
    }

    fn subkey_mut(&mut self, id: SubKeyId) -> Option<&mut SubKey> {
        self.keys
            .get_mut(id.private.0 as usize)
            .and_then(|k| k.subkeys.get_mut(id.index as usize))
    }

    /// Number of completed uses recorded over the pool's lifetime.
    pub fn recorded_uses(&self) -> u64 {
        self.recorded_uses
    }

    /// Uniformly random active subkey. Counters are not touched.
    pub fn select_public_key(&mut self) -> SubKeyRef {
        let active: Vec<SubKeyRef> = self
            .active_subkeys()
            .map(|s| SubKeyRef {
                id: s.id,
                public_key: s.public_key,
            })
            .collect();
        // Rotation mints replacements before archiving, so this holds for
        // every pool built by `create_pool`.
        assert!(!active.is_empty(), "key pool has no active subkey");
        active[self.rng.gen_range(0..active.len())]
    }

    /// Whether `key` belongs to this pool and is still active.
    pub fn is_active(&self, key: &EncryptionKey) -> bool {
        self.index
            .get(key)
            .and_then(|id| self.subkey(*id))
            .is_some_and(|s| {
                s.status == KeyStatus::Active
                    && self.keys[s.id.private.0 as usize].status == KeyStatus::Active
            })
    }

    /// Counts one completed use of `subkey` and applies the rotation rules.
    pub fn record_use(&mut self, subkey: SubKeyId) -> Result<RotationReport, KeyPoolError> {
        let params = self.params;
        let status = self
            .subkey(subkey)
            .ok_or(KeyPoolError::UnknownSubKey(subkey))?
            .status;
        if status == KeyStatus::Archived {
            return Err(KeyPoolError::ArchivedSubKey(subkey));
        }

        let mut report = RotationReport::default();
        self.recorded_uses += 1;

        let sub = self.subkey_mut(subkey).expect("checked above");
        sub.use_count += 1;
        if sub.use_count >= params.public_threshold {
            sub.status = KeyStatus::Archived;
            report.archived_subkeys.push(subkey);
            let parent = &mut self.keys[subkey.private.0 as usize];
            let fresh = parent.mint_subkey();
            let public = parent.subkeys[fresh.index as usize].public_key;
            self.index.insert(public, fresh);
            report.minted_subkeys.push(fresh);
        }

        let parent = &mut self.keys[subkey.private.0 as usize];
        parent.use_count += 1;
        if parent.use_count >= params.private_threshold {
            let secret = DecryptionKey::from_rng(&mut self.rng);
            let fresh = self.push_private(secret);
            report.minted_private = Some(fresh);
            report
                .minted_subkeys
                .extend(self.keys[fresh.0 as usize].subkeys.iter().map(|s| s.id));

            let parent = &mut self.keys[subkey.private.0 as usize];
            parent.status = KeyStatus::Archived;
            for sub in parent.subkeys.iter_mut() {
                if sub.status == KeyStatus::Active {
                    sub.status = KeyStatus::Archived;
                    report.archived_subkeys.push(sub.id);
                }
            }
            report.archived_private = Some(subkey.private);
        }
        Ok(report)
    }

    /// Parent private key of `public_key`, whether or not either is archived.
    pub fn find_private_for(&self, public_key: &EncryptionKey) -> Result<&PrivateKey, KeyPoolError> {
        let id = self.index.get(public_key).ok_or(KeyPoolError::NotFound)?;
        Ok(&self.keys[id.private.0 as usize])
    }

    /// Decryption key for an envelope sealed to `public_key`.
    pub fn decryption_key_for(&self, public_key: &EncryptionKey) -> Result<DecryptionKey, KeyPoolError> {
        let id = self.index.get(public_key).ok_or(KeyPoolError::NotFound)?;
        Ok(self.keys[id.private.0 as usize].subkey_secret(id.index))
    }

    pub fn max_use_count(&self) -> u32 {
        self.subkeys().map(|s| s.use_count).max().unwrap_or(0)
    }

    pub fn total_use_count(&self) -> u64 {
        self.subkeys().map(|s| s.use_count as u64).sum()
    }
}
