//! Facts entities report about their own state at the end of a run, for
//! the invariant sweeps.

use std::collections::BTreeMap;

use crate::anonymizer::Release;
use crate::coordination::{StoreOp, StoreSummary};
use crate::protocol::emergency::AccessLogEntry;
use crate::sim::{EntityId, Scope};

#[derive(Debug, Clone, PartialEq)]
pub struct PoolAudit {
    pub patient: EntityId,
    pub max_use_count: u32,
    pub public_threshold: u32,
    pub total_use_count: u64,
    pub recorded_uses: u64,
    pub active_subkeys: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmergencyAudit {
    pub patient: EntityId,
    pub handle: String,
    pub versions: usize,
    pub access_log: Vec<AccessLogEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReleaseAudit {
    pub researcher: EntityId,
    pub study: String,
    /// Submissions that went into the batch.
    pub included: Vec<Scope>,
    pub release: Release,
}

#[derive(Debug, Clone, Default)]
pub struct Audit {
    pub store_ops: Vec<StoreOp>,
    pub stores: Vec<StoreSummary>,
    pub emergency: Vec<EmergencyAudit>,
    pub notices_received: BTreeMap<EntityId, usize>,
    pub releases_sent: Vec<ReleaseAudit>,
    pub releases_received: Vec<(EntityId, Release)>,
    pub pools: Vec<PoolAudit>,
    pub quarantined: BTreeMap<EntityId, usize>,
}
