//! A colluding coalition pools what its members saw and tries to stitch
//! patients back together.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::anonymizer::Release;
use crate::key_pool::PoolParams;
use crate::protocol::record::Fields;
use crate::sim::{EntityId, EventLog, LogKind, Scope, Token};

/// Everything one observer learned within one scope.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Shard {
    pub observer: EntityId,
    pub scope: Scope,
    /// Best join key the observer has for this scope.
    pub token: Token,
    pub identifiers: BTreeSet<Token>,
    pub attributes: Fields,
    /// Ground truth, for scoring only.
    #[serde(skip)]
    pub patient: Option<EntityId>,
}

/// Shards the coalition merged on a shared token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Profile {
    pub token: Token,
    pub shards: Vec<Shard>,
}

impl Profile {
    pub fn attributes(&self) -> Fields {
        let mut out = Fields::new();
        for s in &self.shards {
            out.extend(s.attributes.iter().map(|(k, v)| (k.clone(), v.clone())));
        }
        out
    }

    pub fn is_merged(&self) -> bool {
        self.shards.len() > 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversaryMetrics {
    pub coalition: Vec<EntityId>,
    pub shards: usize,
    pub profiles: usize,
    pub patients: usize,
    pub linked_patients: usize,
    pub linkage_rate: f64,
    pub enrichment: f64,
    pub precision: Option<f64>,
    /// Profiles singled out in a release by their generalized quasi ids.
    pub reidentified: Option<usize>,
    /// Closed-form expectation, when the schedule admits one.
    pub analytic_linkage_rate: Option<f64>,
}

/// Collects the coalition's observations, one shard per (observer, scope).
/// Messages count for their receiver, disclosures for their holder.
pub fn harvest_shards(
    log: &EventLog,
    coalition: &BTreeSet<EntityId>,
    truth: &BTreeMap<Scope, EntityId>,
) -> Vec<Shard> {
    let mut grouped: BTreeMap<(EntityId, Scope), (BTreeSet<Token>, Fields)> = BTreeMap::new();
    for record in log.records() {
        if matches!(record.kind, LogKind::Fault(_)) || !coalition.contains(&record.receiver) {
            continue;
        }
        for item in &record.observed {
            let entry = grouped
                .entry((record.receiver.clone(), item.scope.clone()))
                .or_default();
            entry.0.extend(item.identifiers.iter().cloned());
            entry
                .1
                .extend(item.attributes.iter().map(|(k, v)| (k.clone(), v.clone())));
        }
    }
    grouped
        .into_iter()
        .map(|((observer, scope), (identifiers, attributes))| {
            let token = identifiers
                .iter()
                .next()
                .cloned()
                .unwrap_or_else(|| Token::Opaque(format!("{observer}|{scope}")));
            Shard {
                patient: truth.get(&scope).cloned(),
                observer,
                scope,
                token,
                identifiers,
                attributes,
            }
        })
        .collect()
}

/// Groups shards sharing a token.
pub fn collude_join(shards: &[Shard]) -> Vec<Profile> {
    let mut by_token: BTreeMap<Token, Vec<Shard>> = BTreeMap::new();
    for s in shards {
        by_token.entry(s.token.clone()).or_default().push(s.clone());
    }
    by_token
        .into_iter()
        .map(|(token, shards)| Profile { token, shards })
        .collect()
}

/// Patients some profile ties together across at least two observers.
pub fn linked_patients(profiles: &[Profile]) -> BTreeSet<EntityId> {
    let mut linked = BTreeSet::new();
    for p in profiles {
        let mut observers: BTreeMap<&EntityId, BTreeSet<&EntityId>> = BTreeMap::new();
        for s in &p.shards {
            if let Some(patient) = &s.patient {
                observers.entry(patient).or_default().insert(&s.observer);
            }
        }
        linked.extend(
            observers
                .into_iter()
                .filter(|(_, obs)| obs.len() >= 2)
                .map(|(patient, _)| patient.clone()),
        );
    }
    linked
}

/// Fraction of `patients` the coalition linked.
pub fn reassembly_rate(profiles: &[Profile], patients: &BTreeSet<EntityId>) -> f64 {
    if patients.is_empty() {
        return 0.0;
    }
    let linked = linked_patients(profiles);
    patients.iter().filter(|p| linked.contains(*p)).count() as f64 / patients.len() as f64
}

/// Mean over patients of how much larger their best profile is than their
/// best single shard, counting only attributes that are really theirs.
pub fn enrichment(profiles: &[Profile]) -> f64 {
    let mut best_shard: BTreeMap<&EntityId, usize> = BTreeMap::new();
    let mut best_profile: BTreeMap<&EntityId, usize> = BTreeMap::new();
    for p in profiles {
        let mut own: BTreeMap<&EntityId, BTreeSet<(&String, &String)>> = BTreeMap::new();
        for s in &p.shards {
            let Some(patient) = &s.patient else { continue };
            let size = best_shard.entry(patient).or_default();
            *size = (*size).max(s.attributes.len());
            own.entry(patient).or_default().extend(s.attributes.iter());
        }
        for (patient, attrs) in own {
            let size = best_profile.entry(patient).or_default();
            *size = (*size).max(attrs.len());
        }
    }
    let ratios: Vec<f64> = best_shard
        .iter()
        .filter(|(_, &m)| m > 0)
        .map(|(patient, &m)| best_profile[patient] as f64 / m as f64)
        .collect();
    if ratios.is_empty() {
        1.0
    } else {
        ratios.iter().sum::<f64>() / ratios.len() as f64
    }
}

/// Share of merged profiles whose shards all belong to one patient.
pub fn precision(profiles: &[Profile]) -> Option<f64> {
    let merged: Vec<&Profile> = profiles.iter().filter(|p| p.is_merged()).collect();
    if merged.is_empty() {
        return None;
    }
    let pure = merged
        .iter()
        .filter(|p| {
            let owners: BTreeSet<Option<&EntityId>> = p.shards.iter().map(|s| s.patient.as_ref()).collect();
            owners.len() == 1 && !owners.contains(&None)
        })
        .count();
    Some(pure as f64 / merged.len() as f64)
}

/// For each profile, whether some release holds exactly one record whose
/// quasi ids equal the profile's, once generalized the way that release
/// was. An empty list of releases flags nothing.
pub fn quasi_id_linkage(profiles: &[Profile], releases: &[Release]) -> Vec<bool> {
    profiles
        .iter()
        .map(|p| {
            let attrs = p.attributes();
            releases.iter().any(|release| unique_match(&attrs, release))
        })
        .collect()
}

fn unique_match(attrs: &Fields, release: &Release) -> bool {
    let Some(key) = release
        .quasi_id_fields
        .iter()
        .map(|f| attrs.get(f).and_then(|v| release.generalize(f, v)))
        .collect::<Option<Vec<String>>>()
    else {
        return false;
    };
    let matching = release
        .records
        .iter()
        .filter(|r| {
            release
                .quasi_id_fields
                .iter()
                .zip(&key)
                .all(|(f, v)| r.get(f) == Some(v))
        })
        .count();
    matching == 1
}

/// Every shard is backed by something its observer was actually sent or
/// actually decrypted. Returns the first unbacked shard.
pub fn audit_shards<'a>(shards: &'a [Shard], log: &EventLog) -> Result<(), &'a Shard> {
    let mut seen: BTreeMap<(&EntityId, &Scope), (BTreeSet<&Token>, BTreeSet<(&String, &String)>)> = BTreeMap::new();
    for record in log.records() {
        for item in &record.observed {
            let entry = seen.entry((&record.receiver, &item.scope)).or_default();
            entry.0.extend(item.identifiers.iter());
            entry.1.extend(item.attributes.iter());
        }
    }
    for s in shards {
        let Some((ids, attrs)) = seen.get(&(&s.observer, &s.scope)) else {
            return Err(s);
        };
        let ids_ok = s.identifiers.iter().all(|t| ids.contains(t));
        let attrs_ok = s.attributes.iter().all(|a| attrs.contains(&a));
        if !ids_ok || !attrs_ok {
            return Err(s);
        }
    }
    Ok(())
}

/// Expected linkage rate when every patient makes `rounds` visits to
/// distinct labs, all of which collude, and each visit deposits a key
/// drawn from a pool with `params`. A patient is linked exactly when some
/// subkey is drawn twice.
///
/// Along a collision-free history every drawn subkey has one use, so the
/// only state that matters per private key is how many of its active
/// subkeys are already used and how many uses it has absorbed.
pub fn analytic_linkage_rate(params: PoolParams, rounds: usize) -> f64 {
    if params.validate().is_err() {
        return 0.0;
    }
    let start = vec![(0u32, 0u32); params.private_keys as usize];
    1.0 - no_collision(&params, &start, rounds)
}

fn no_collision(params: &PoolParams, state: &[(u32, u32)], rounds: usize) -> f64 {
    if rounds == 0 {
        return 1.0;
    }
    let per = params.subkeys_per_private;
    let total = (state.len() as u32 * per) as f64;
    let mut p = 0.0;
    for (j, &(used, uses)) in state.iter().enumerate() {
        let fresh = per - used;
        if fresh == 0 {
            continue;
        }
        let mut next = state.to_vec();
        // A subkey at its threshold is replaced by a fresh one.
        let used_after = if params.public_threshold <= 1 { used } else { used + 1 };
        next[j] = if uses + 1 >= params.private_threshold {
            (0, 0)
        } else {
            (used_after, uses + 1)
        };
        p += fresh as f64 / total * no_collision(params, &next, rounds - 1);
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::ObservedItem;

    fn shard(observer: &str, scope: &str, token: Token, patient: &str, attrs: &[(&str, &str)]) -> Shard {
        Shard {
            observer: EntityId::new(observer),
            scope: Scope::Isolated(scope.into()),
            identifiers: [token.clone()].into(),
            token,
            attributes: attrs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            patient: Some(EntityId::new(patient)),
        }
    }

    fn ssn(v: &str) -> Token {
        Token::NationalId(v.into())
    }

    #[test]
    fn shared_national_id_links_across_labs() {
        let shards = vec![
            shard("lab:a", "s1", ssn("1"), "p1", &[("xray", "clear")]),
            shard("lab:b", "s2", ssn("1"), "p1", &[("blood", "low")]),
            shard("lab:a", "s3", ssn("2"), "p2", &[("xray", "cloudy")]),
        ];
        let profiles = collude_join(&shards);
        assert_eq!(profiles.len(), 2);
        let patients = [EntityId::new("p1"), EntityId::new("p2")].into();
        assert_eq!(reassembly_rate(&profiles, &patients), 0.5);
        assert_eq!(precision(&profiles), Some(1.0));
        // p1 doubles, p2 stays put.
        assert_eq!(enrichment(&profiles), 1.5);
    }

    #[test]
    fn same_observer_twice_is_not_linkage() {
        let shards = vec![
            shard("lab:a", "s1", ssn("1"), "p1", &[]),
            shard("lab:a", "s2", ssn("1"), "p1", &[]),
        ];
        let patients = [EntityId::new("p1")].into();
        assert_eq!(reassembly_rate(&collude_join(&shards), &patients), 0.0);
    }

    #[test]
    fn wrong_merges_lower_precision() {
        let k = Token::Opaque("k".into());
        let shards = vec![
            shard("lab:a", "s1", k.clone(), "p1", &[]),
            shard("lab:b", "s2", k, "p2", &[]),
        ];
        assert_eq!(precision(&collude_join(&shards)), Some(0.0));
        assert_eq!(precision(&[]), None);
    }

    #[test]
    fn harvest_uses_only_coalition_receivers() {
        use crate::coordination::SessionId;
        use crate::rng::seeded;
        use crate::sim::{LogRecord, LogKind};

        let s = SessionId::from_rng(&mut seeded(1));
        let mut log = EventLog::default();
        for (i, receiver) in ["lab:x", "physician:0"].iter().enumerate() {
            log.push(LogRecord {
                time: i as u64 + 1,
                sender: EntityId::new("patient:0"),
                receiver: EntityId::new(*receiver),
                kind: LogKind::Message("m".into()),
                session: Some(s),
                digest: String::new(),
                observed: vec![ObservedItem::new(Scope::Session(s)).with_id(Token::Session(s))],
                payload: None,
            });
        }
        let coalition = [EntityId::new("lab:x")].into();
        let truth = [(Scope::Session(s), EntityId::new("patient:0"))].into();
        let shards = harvest_shards(&log, &coalition, &truth);
        assert_eq!(shards.len(), 1);
        assert_eq!(shards[0].token, Token::Session(s));
        assert_eq!(shards[0].patient, Some(EntityId::new("patient:0")));
        assert!(audit_shards(&shards, &log).is_ok());
    }

    #[test]
    fn analytic_rate_matches_hand_computation() {
        let params = |t| PoolParams {
            private_keys: 2,
            subkeys_per_private: 2,
            public_threshold: t,
            private_threshold: 100,
        };
        assert_eq!(analytic_linkage_rate(params(1), 3), 0.0);
        // Four fresh subkeys, three draws, no repeats: 1 * 3/4 * 2/4.
        assert!((analytic_linkage_rate(params(2), 3) - 0.625).abs() < 1e-12);
        assert_eq!(analytic_linkage_rate(params(2), 1), 0.0);
    }

    #[test]
    fn private_rotation_refreshes_subkeys() {
        let params = PoolParams {
            private_keys: 1,
            subkeys_per_private: 2,
            public_threshold: 5,
            private_threshold: 1,
        };
        // Every use retires the whole private key.
        assert_eq!(analytic_linkage_rate(params, 4), 0.0);
    }

    fn zip_release(zips: &[&str], k: usize) -> Release {
        let mut r = Release::unfiltered(
            "s",
            &["zip".to_string()],
            zips.iter()
                .map(|z| [("zip".to_string(), z.to_string()), ("diagnosis".to_string(), "flu".to_string())].into())
                .collect(),
        );
        r.k = k;
        r.sensitive_field = "diagnosis".into();
        r
    }

    fn zip_profile(zip: &str) -> Profile {
        Profile {
            token: Token::Opaque(zip.into()),
            shards: vec![shard("lab:a", zip, Token::Opaque(zip.into()), "p", &[("zip", zip)])],
        }
    }

    #[test]
    fn unique_zips_are_reidentified_without_the_gate() {
        let release = zip_release(&["47677", "47678", "47602"], 1);
        let flags = quasi_id_linkage(&[zip_profile("47678"), zip_profile("99999")], &[release]);
        assert_eq!(flags, vec![true, false]);
    }

    #[test]
    fn k_anonymous_release_singles_out_nobody() {
        let release = zip_release(&["47677", "47677", "47602", "47602"], 2);
        assert!(release.passes_gates());
        let profiles = [zip_profile("47677"), zip_profile("47602")];
        assert_eq!(quasi_id_linkage(&profiles, &[release]), vec![false, false]);
        assert_eq!(quasi_id_linkage(&profiles, &[]), vec![false, false]);
    }
}
