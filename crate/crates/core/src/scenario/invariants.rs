//! Post-run checks over the log, the ground truth and entity audits.

use std::collections::{BTreeMap, BTreeSet};

use crate::adversary::{audit_shards, harvest_shards, Shard};
use crate::coordination::{Role, SessionId, StoreOpKind, StorePurpose, StoreSummary};
use crate::protocol::messages::Payload;
use crate::protocol::nodes::TokenMode;
use crate::protocol::record::is_explicit_id;
use crate::report::{FlowStatus, InvariantCheck};
use crate::sim::{Audit, EntityId, EntityKind, EventLog, LogKind, Pki, Scope, Token};

use super::run::{ConsentLedger, LabRun};
use super::Scenario;

pub(super) struct Facts<'a> {
    pub scenario: &'a Scenario,
    pub log: &'a EventLog,
    pub pki: &'a Pki,
    pub truth: &'a BTreeMap<Scope, EntityId>,
    pub audit: &'a Audit,
    pub lab_runs: &'a [LabRun],
    pub consents: &'a ConsentLedger,
    pub undeliverable: usize,
    pub coalition_shards: Option<&'a [Shard]>,
}

type Outcome = Result<String, String>;

pub(super) fn check_all(f: &Facts<'_>) -> Vec<InvariantCheck> {
    let checks: [(&str, fn(&Facts<'_>) -> Outcome); 13] = [
        ("confidentiality", confidentiality),
        ("end_to_end_integrity", end_to_end_integrity),
        ("tamper_aborts", tamper_aborts),
        ("lab_flows_settle", lab_flows_settle),
        ("consent_soundness", consent_soundness),
        ("notification_totality", notification_totality),
        ("store_acl", store_acl),
        ("labs_receive_no_identity", labs_receive_no_identity),
        ("fresh_lab_sessions", fresh_lab_sessions),
        ("monotone_time", monotone_time),
        ("key_pool_bounds", key_pool_bounds),
        ("honest_harvest", honest_harvest),
        ("release_gates", release_gates),
    ];
    let mut out: Vec<InvariantCheck> = checks
        .iter()
        .map(|(name, check)| {
            let (passed, detail) = match check(f) {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            InvariantCheck {
                name: name.to_string(),
                passed,
                detail,
            }
        })
        .collect();
    out.push(InvariantCheck {
        name: "all_delivered".into(),
        passed: f.undeliverable == 0,
        detail: format!("{} messages had no recipient", f.undeliverable),
    });
    out
}

fn permitted(kind: Option<EntityKind>, label: &str) -> bool {
    use EntityKind::*;
    matches!(
        (kind, label),
        (Some(Lab | Patient), "lab-result")
            | (Some(Physician), "lab-result" | "consult")
            | (Some(Anonymizer), "submission")
            | (Some(Researcher), "release" | "direct-submission")
            | (Some(EmergencyContact), "emergency-snapshot")
    )
}

/// Plaintext only reaches entities meant to hold it, and results reach
/// nobody but the issuing lab, the patient and the physician.
fn confidentiality(f: &Facts<'_>) -> Outcome {
    let mut issued = BTreeSet::new();
    let mut count = 0;
    for r in f.log.records() {
        let LogKind::Disclosure(label) = &r.kind else { continue };
        count += 1;
        if !permitted(r.receiver.kind(), label) {
            return Err(format!("{} came to hold `{label}` plaintext at t={}", r.receiver, r.time));
        }
        if label == "lab-result" && r.receiver.is(EntityKind::Lab) {
            issued.insert(r.digest.clone());
        }
    }
    for r in f.log.records() {
        if matches!(&r.kind, LogKind::Disclosure(l) if l == "lab-result") && !issued.contains(&r.digest) {
            return Err(format!("{} holds a result no lab issued", r.receiver));
        }
    }
    Ok(format!("{count} disclosures, all to permitted holders"))
}

fn end_to_end_integrity(f: &Facts<'_>) -> Outcome {
    let mut completed = 0;
    for run in f.lab_runs {
        if run.delivered.is_some() && run.delivered != run.issued {
            return Err(format!("{}: physician plaintext differs from lab plaintext", run.patient));
        }
        if run.status == FlowStatus::Completed {
            if run.issued.is_none() {
                return Err(format!("{}: completed without an issued result", run.patient));
            }
            completed += 1;
        }
    }
    Ok(format!("{completed} completed flows delivered exactly what the lab issued"))
}

fn tamper_aborts(f: &Facts<'_>) -> Outcome {
    let mut n = 0;
    for run in f.lab_runs {
        let Some(t) = run.tamper else { continue };
        n += 1;
        if !run.fired {
            return Err(format!("{}: {} never fired", run.patient, t.label()));
        }
        if !matches!(run.status, FlowStatus::Aborted { .. }) || run.delivered.is_some() {
            return Err(format!("{}: {} did not abort the flow", run.patient, t.label()));
        }
    }
    Ok(format!("{n} tampered flows aborted"))
}

fn lab_flows_settle(f: &Facts<'_>) -> Outcome {
    match f.lab_runs.iter().find(|r| r.status == FlowStatus::Incomplete) {
        Some(r) => Err(format!("{}: flow went quiet without an outcome", r.patient)),
        None => Ok(format!("{} lab flows reached an outcome", f.lab_runs.len())),
    }
}

fn summaries(audit: &Audit) -> BTreeMap<SessionId, &StoreSummary> {
    audit.stores.iter().map(|s| (s.session, s)).collect()
}

/// Every submission, direct or pooled, comes from a patient who agreed to
/// that researcher and study, and carries only the fields agreed to.
fn consent_soundness(f: &Facts<'_>) -> Outcome {
    let stores = summaries(f.audit);
    // The grant in force at `time`, if it matches the route taken.
    let consent_at = |researcher: &EntityId, study: &str, patient: &EntityId, time: u64, bypass: bool| {
        f.consents
            .get(&(researcher.clone(), study.to_string()))
            .and_then(|m| m.get(patient))
            .and_then(|grants| grants.iter().rev().find(|c| c.since <= time))
            .filter(|c| c.bypass == bypass)
    };
    let study_of = |session: &SessionId| match stores.get(session).map(|s| &s.purpose) {
        Some(StorePurpose::Submissions { researcher, study }) => Some((EntityId::researcher(researcher), study.clone())),
        _ => None,
    };

    let mut pooled = 0;
    for op in &f.audit.store_ops {
        if op.op != StoreOpKind::Write || op.outcome.is_err() || op.role != Some(Role::Patient) {
            continue;
        }
        let Some((researcher, study)) = study_of(&op.session) else { continue };
        if consent_at(&researcher, &study, &op.entity, op.time, false).is_none() {
            return Err(format!("{} submitted to {researcher}/{study} without consent", op.entity));
        }
        pooled += 1;
    }

    let mut checked = BTreeSet::new();
    for r in f.log.records() {
        let LogKind::Disclosure(label) = &r.kind else { continue };
        if label != "submission" {
            continue;
        }
        for item in &r.observed {
            let Scope::Submission { session, .. } = &item.scope else {
                return Err("submission outside a submission scope".into());
            };
            let Some(patient) = f.truth.get(&item.scope) else {
                return Err(format!("submission {} has no known origin", item.scope));
            };
            let Some((researcher, study)) = study_of(session) else {
                return Err(format!("submission {} is not in a study store", item.scope));
            };
            let Some(consent) = consent_at(&researcher, &study, patient, r.time, false) else {
                return Err(format!("{patient} reached the anonymizer without consent"));
            };
            if let Some(extra) = item.attributes.keys().find(|k| !consent.share.contains(*k)) {
                return Err(format!("{patient} shared `{extra}` beyond its consent"));
            }
            checked.insert(&item.scope);
        }
    }

    let mut direct = 0;
    for r in f.log.messages() {
        let Some(Payload::DirectSubmission { study, .. }) = &r.payload else { continue };
        if consent_at(&r.receiver, study, &r.sender, r.time, true).is_none() {
            return Err(format!("{} sent {} a direct submission without consent", r.sender, r.receiver));
        }
        direct += 1;
    }

    for sent in &f.audit.releases_sent {
        for scope in &sent.included {
            if !checked.contains(scope) {
                let who = f.truth.get(scope).map_or("an unknown patient".to_string(), |p| p.to_string());
                return Err(format!("release to {} includes a submission from {who} that was never consented", sent.researcher));
            }
        }
    }
    Ok(format!("{pooled} pooled and {direct} direct submissions, all consented"))
}

/// Every access to a snapshot, successful or not, produced exactly one
/// notice to its patient, and accesses by anyone but the designated contact
/// are flagged.
fn notification_totality(f: &Facts<'_>) -> Outcome {
    let mut accesses = 0;
    let mut audited = BTreeSet::new();
    for snap in &f.audit.emergency {
        audited.insert(&snap.patient);
        let notices = f.audit.notices_received.get(&snap.patient).copied().unwrap_or(0);
        if notices != snap.access_log.len() {
            return Err(format!(
                "{}: {} accesses but {notices} notices",
                snap.patient,
                snap.access_log.len()
            ));
        }
        let contact = snap
            .patient
            .as_str()
            .strip_prefix("patient:")
            .map(|i| EntityId::new(format!("contact:{i}")));
        for entry in &snap.access_log {
            let by_contact = f.pki.owner_of(&entry.accessor) == contact.as_ref();
            if !by_contact && !entry.flag_raised {
                return Err(format!("{}: access by a stranger was not flagged", snap.patient));
            }
        }
        accesses += snap.access_log.len();
    }
    for (patient, n) in &f.audit.notices_received {
        if *n > 0 && !audited.contains(patient) {
            return Err(format!("{patient} got notices for a snapshot it never deposited"));
        }
    }
    // A read only reaches a snapshot once the deposit has been confirmed.
    let mut deposited = BTreeSet::new();
    let mut reads = 0;
    let mut notices = 0;
    for r in f.log.messages() {
        match &r.payload {
            Some(Payload::EmergencyDeposited { handle, .. }) => {
                deposited.insert(&handle.0);
            }
            Some(Payload::EmergencyRead { handle, .. }) if deposited.contains(&handle.0) => reads += 1,
            Some(Payload::EmergencyNotice { .. }) => notices += 1,
            _ => {}
        }
    }
    if reads != accesses || notices != accesses {
        return Err(format!("{reads} reads, {accesses} logged accesses, {notices} notices"));
    }
    Ok(format!("{accesses} accesses, each logged and notified"))
}

fn store_acl(f: &Facts<'_>) -> Outcome {
    let stores = summaries(f.audit);
    let mut ok = 0;
    for op in &f.audit.store_ops {
        if op.outcome.is_err() {
            continue;
        }
        let Some(role) = op.role else {
            return Err(format!("{} used a store without a role", op.entity));
        };
        let Some(store) = stores.get(&op.session) else {
            return Err(format!("{} used an unknown store", op.entity));
        };
        let access = store.acl.get(&role).copied().unwrap_or_default();
        let allowed = match op.op {
            StoreOpKind::Read(_) => access.read,
            StoreOpKind::Write => access.write,
        };
        if !allowed || store.members.get(&op.entity) != Some(&role) || op.entity.is(EntityKind::Intruder) {
            return Err(format!("{} performed {:?} as {role:?} against the ACL", op.entity, op.op));
        }
        ok += 1;
    }
    Ok(format!("{ok} store operations, all within the ACL"))
}

fn identifying(item: &crate::sim::ObservedItem) -> bool {
    item.identifiers.iter().any(|t| matches!(t, Token::NationalId(_))) || item.attributes.keys().any(|k| is_explicit_id(k))
}

/// Coordination never tells a lab who the patient is. Under key tokens the
/// patient does not either.
fn labs_receive_no_identity(f: &Facts<'_>) -> Outcome {
    let keys_mode = f.scenario.adversary.token_mode == TokenMode::DaprivKeys;
    let mut n = 0;
    for r in f.log.records() {
        if !r.receiver.is(EntityKind::Lab) {
            continue;
        }
        n += 1;
        let from_coordination = r.sender.is(EntityKind::AuthServer) || r.sender.is(EntityKind::Directory);
        if (from_coordination || keys_mode) && r.observed.iter().any(identifying) {
            return Err(format!("{} learned an explicit identifier from {} at t={}", r.receiver, r.sender, r.time));
        }
    }
    let scope = if keys_mode { "from anyone" } else { "from coordination" };
    Ok(format!("{n} lab records, no identifiers {scope}"))
}

fn fresh_lab_sessions(f: &Facts<'_>) -> Outcome {
    let mut seen = BTreeSet::new();
    for r in f.log.messages() {
        if let Some(Payload::SessionGranted { session, .. }) = &r.payload {
            if !seen.insert(*session) {
                return Err(format!("session {session} was granted twice"));
            }
        }
    }
    Ok(format!("{} lab sessions, all distinct", seen.len()))
}

fn monotone_time(f: &Facts<'_>) -> Outcome {
    let records = f.log.records();
    match records.windows(2).find(|w| w[1].time <= w[0].time) {
        Some(w) => Err(format!("time went from {} to {}", w[0].time, w[1].time)),
        None => Ok(format!("{} records in strictly increasing time", records.len())),
    }
}

fn key_pool_bounds(f: &Facts<'_>) -> Outcome {
    let params = f.scenario.key_pool;
    let mut completed: BTreeMap<&EntityId, u64> = BTreeMap::new();
    for run in f.lab_runs.iter().filter(|r| r.status == FlowStatus::Completed) {
        *completed.entry(&run.patient).or_default() += 1;
    }
    for pool in &f.audit.pools {
        if pool.max_use_count > pool.public_threshold {
            return Err(format!("{}: a subkey was used {} times", pool.patient, pool.max_use_count));
        }
        if pool.total_use_count != pool.recorded_uses {
            return Err(format!("{}: use counters disagree", pool.patient));
        }
        if pool.active_subkeys != params.active_subkeys() as usize {
            return Err(format!("{}: {} active subkeys", pool.patient, pool.active_subkeys));
        }
        if pool.recorded_uses != completed.get(&pool.patient).copied().unwrap_or(0) {
            return Err(format!("{}: uses do not match completed flows", pool.patient));
        }
    }
    Ok(format!("{} pools within thresholds", f.audit.pools.len()))
}

/// The adversary only ever works from what its members were sent or
/// decrypted. With no coalition configured, every entity is harvested.
fn honest_harvest(f: &Facts<'_>) -> Outcome {
    let everyone;
    let shards = match f.coalition_shards {
        Some(s) => s,
        None => {
            let all: BTreeSet<EntityId> = f.pki.ids().cloned().collect();
            everyone = harvest_shards(f.log, &all, f.truth);
            &everyone
        }
    };
    match audit_shards(shards, f.log) {
        Ok(()) => Ok(format!("{} shards, each backed by the log", shards.len())),
        Err(s) => Err(format!("{} has an unbacked shard in {}", s.observer, s.scope)),
    }
}

fn release_gates(f: &Facts<'_>) -> Outcome {
    let min = f.scenario.anonymizer.min_pool_size;
    for sent in &f.audit.releases_sent {
        if !sent.release.passes_gates() {
            return Err(format!("release to {} fails its own gates", sent.researcher));
        }
        if sent.release.records.len() > sent.included.len() {
            return Err(format!("release to {} has records with no submission", sent.researcher));
        }
        let pooled: BTreeSet<&Scope> = f
            .truth
            .keys()
            .filter(|s| matches!(s, Scope::Submission { .. }))
            .filter(|s| sent.included.contains(s))
            .collect();
        if pooled.len() != sent.included.len() {
            return Err(format!("release to {} includes unknown submissions", sent.researcher));
        }
        let writes = f
            .audit
            .store_ops
            .iter()
            .filter(|op| op.op == StoreOpKind::Write && op.outcome.is_ok() && op.role == Some(Role::Patient))
            .filter(|op| sent.included.iter().any(|s| matches!(s, Scope::Submission { session, .. } if *session == op.session)))
            .count();
        if writes < min {
            return Err(format!("release to {} drew on {writes} submissions, below {min}", sent.researcher));
        }
    }
    Ok(format!("{} releases, all gated", f.audit.releases_sent.len()))
}
