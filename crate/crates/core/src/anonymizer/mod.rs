//! k-anonymity and entropy l-diversity gates, greedy full-domain
//! generalization, and the pool that releases batches to researchers.

mod node;

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::protocol::record::{is_explicit_id, Fields};
use crate::sim::Scope;

pub use node::AnonymizerNode;

/// The value every hierarchy maps a suppressed or missing field to.
pub const SUPPRESSED: &str = "*";

/// Slack for comparing entropies against `ln(l)`.
pub const ENTROPY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnonymizerError {
    #[error("record {record} has no field `{field}`")]
    MissingField { record: usize, field: String },
    #[error("k must be at least 1")]
    BadK,
    #[error("l must be a finite number at least 1, got {0}")]
    BadL(f64),
    #[error("hierarchy for `{field}` has no mapping for `{value}` at level {level}")]
    Unmapped { field: String, value: String, level: usize },
    #[error("hierarchy for `{field}` is not nested at level {level}: `{a}` and `{b}` split")]
    NotNested { field: String, level: usize, a: String, b: String },
    #[error("no generalization satisfies the policy without suppressing over half the records")]
    Infeasible,
}

/// One coarsening step above the raw value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Level {
    /// Keep the first `keep` characters and mask the rest with `*`.
    Prefix { keep: usize },
    /// Explicit value-to-value table.
    Table(BTreeMap<String, String>),
    Suppress,
}

impl Level {
    fn apply(&self, value: &str) -> Option<String> {
        if value == SUPPRESSED {
            return Some(SUPPRESSED.to_string());
        }
        match self {
            Level::Prefix { keep } => Some(
                value
                    .chars()
                    .enumerate()
                    .map(|(i, c)| if i < *keep { c } else { '*' })
                    .collect(),
            ),
            Level::Table(map) => map.get(value).cloned(),
            Level::Suppress => Some(SUPPRESSED.to_string()),
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum LevelRepr {
    Text(String),
    Table { map: BTreeMap<String, String> },
}

impl<'de> Deserialize<'de> for Level {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match LevelRepr::deserialize(d)? {
            LevelRepr::Table { map } => Ok(Level::Table(map)),
            LevelRepr::Text(t) if t == SUPPRESSED => Ok(Level::Suppress),
            LevelRepr::Text(t) => {
                let keep = t
                    .strip_prefix("keep:")
                    .and_then(|n| n.parse().ok())
                    .ok_or_else(|| serde::de::Error::custom(format!("unknown level `{t}`; use `keep:N`, `*` or {{ map = ... }}")))?;
                Ok(Level::Prefix { keep })
            }
        }
    }
}

impl Serialize for Level {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        match self {
            Level::Prefix { keep } => s.collect_str(&format_args!("keep:{keep}")),
            Level::Suppress => s.serialize_str(SUPPRESSED),
            Level::Table(map) => {
                let mut m = s.serialize_map(Some(1))?;
                m.serialize_entry("map", map)?;
                m.end()
            }
        }
    }
}

/// Level 0 is the raw value; `levels[i]` is level `i + 1`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Hierarchy {
    pub levels: Vec<Level>,
}

impl Hierarchy {
    pub fn new(levels: Vec<Level>) -> Self {
        Self { levels }
    }

    pub fn suppress_only() -> Self {
        Self::new(vec![Level::Suppress])
    }

    pub fn prefixes(keeps: &[usize]) -> Self {
        let mut levels: Vec<Level> = keeps.iter().map(|&keep| Level::Prefix { keep }).collect();
        levels.push(Level::Suppress);
        Self::new(levels)
    }

    pub fn max_level(&self) -> usize {
        self.levels.len()
    }

    /// `value` at `level`; unmapped table entries fall back to `*`.
    pub fn generalize(&self, value: &str, level: usize) -> String {
        if level == 0 {
            return value.to_string();
        }
        self.levels
            .get(level - 1)
            .and_then(|l| l.apply(value))
            .unwrap_or_else(|| SUPPRESSED.to_string())
    }

    /// Every value maps at every level, and values merged at one level stay
    /// merged at all higher levels.
    pub fn validate<'a>(&self, field: &str, values: impl IntoIterator<Item = &'a str>) -> Result<(), AnonymizerError> {
        let values: BTreeSet<&str> = values.into_iter().collect();
        for (i, level) in self.levels.iter().enumerate() {
            for v in &values {
                if level.apply(v).is_none() {
                    return Err(AnonymizerError::Unmapped {
                        field: field.to_string(),
                        value: v.to_string(),
                        level: i + 1,
                    });
                }
            }
        }
        for level in 0..self.max_level() {
            let mut parent: BTreeMap<String, (String, &str)> = BTreeMap::new();
            for v in &values {
                let here = self.generalize(v, level);
                let up = self.generalize(v, level + 1);
                match parent.get(&here) {
                    Some((seen, other)) if *seen != up => {
                        return Err(AnonymizerError::NotNested {
                            field: field.to_string(),
                            level: level + 1,
                            a: other.to_string(),
                            b: v.to_string(),
                        })
                    }
                    Some(_) => {}
                    None => {
                        parent.insert(here, (up, v));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Default hierarchies for the standard quasi-identifiers.
pub fn default_hierarchy(field: &str) -> Hierarchy {
    match field {
        "zip" => Hierarchy::prefixes(&[4, 3, 2]),
        "birth_date" => Hierarchy::prefixes(&[7, 4, 3]),
        _ => Hierarchy::suppress_only(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnonymizationPolicy {
    pub k: usize,
    pub l: f64,
    pub quasi_id_fields: Vec<String>,
    pub sensitive_field: String,
    pub hierarchies: BTreeMap<String, Hierarchy>,
}

impl AnonymizationPolicy {
    pub fn new(k: usize, l: f64, quasi_id_fields: &[&str], sensitive_field: &str) -> Self {
        Self {
            k,
            l,
            quasi_id_fields: quasi_id_fields.iter().map(|s| s.to_string()).collect(),
            sensitive_field: sensitive_field.to_string(),
            hierarchies: quasi_id_fields
                .iter()
                .map(|f| (f.to_string(), default_hierarchy(f)))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<(), AnonymizerError> {
        if self.k < 1 {
            return Err(AnonymizerError::BadK);
        }
        if !(self.l.is_finite() && self.l >= 1.0) {
            return Err(AnonymizerError::BadL(self.l));
        }
        Ok(())
    }

    /// Hierarchy for `field`, falling back to suppression only.
    pub fn hierarchy(&self, field: &str) -> Cow<'_, Hierarchy> {
        match self.hierarchies.get(field) {
            Some(h) => Cow::Borrowed(h),
            None => Cow::Owned(Hierarchy::suppress_only()),
        }
    }

    pub fn max_levels(&self) -> Vec<usize> {
        self.quasi_id_fields
            .iter()
            .map(|f| self.hierarchy(f).max_level())
            .collect()
    }
}

fn projection(records: &[Fields], fields: &[String]) -> Result<Vec<Vec<String>>, AnonymizerError> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            fields
                .iter()
                .map(|f| {
                    r.get(f).cloned().ok_or_else(|| AnonymizerError::MissingField {
                        record: i,
                        field: f.clone(),
                    })
                })
                .collect()
        })
        .collect()
}

/// Record indices grouped by exact equality of their quasi-identifier
/// projection, in ascending projection order.
pub fn equivalence_classes(records: &[Fields], quasi_id_fields: &[String]) -> Result<Vec<Vec<usize>>, AnonymizerError> {
    let keys = projection(records, quasi_id_fields)?;
    let mut classes: BTreeMap<Vec<String>, Vec<usize>> = BTreeMap::new();
    for (i, key) in keys.into_iter().enumerate() {
        classes.entry(key).or_default().push(i);
    }
    Ok(classes.into_values().collect())
}

pub fn check_k_anonymity(records: &[Fields], quasi_id_fields: &[String], k: usize) -> Result<bool, AnonymizerError> {
    Ok(equivalence_classes(records, quasi_id_fields)?
        .iter()
        .all(|c| c.len() >= k))
}

/// Shannon entropy (natural log) of the empirical distribution of `values`.
pub fn entropy<'a>(values: impl IntoIterator<Item = &'a str>) -> f64 {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut n = 0usize;
    for v in values {
        *counts.entry(v).or_default() += 1;
        n += 1;
    }
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    -counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

/// Whether a class with these sensitive values has entropy at least `ln(l)`.
pub fn class_is_l_diverse<'a>(values: impl IntoIterator<Item = &'a str>, l: f64) -> bool {
    entropy(values) + ENTROPY_TOLERANCE >= l.ln()
}

pub fn entropy_l_diversity(
    records: &[Fields],
    quasi_id_fields: &[String],
    sensitive_field: &str,
    l: f64,
) -> Result<bool, AnonymizerError> {
    let sensitive = projection(records, &[sensitive_field.to_string()])?;
    Ok(equivalence_classes(records, quasi_id_fields)?.iter().all(|class| {
        class_is_l_diverse(class.iter().map(|&i| sensitive[i][0].as_str()), l)
    }))
}

/// Indices of records whose class fails either gate.
pub fn violating_records(records: &[Fields], policy: &AnonymizationPolicy) -> Result<Vec<usize>, AnonymizerError> {
    let sensitive = projection(records, &[policy.sensitive_field.clone()])?;
    let mut out = Vec::new();
    for class in equivalence_classes(records, &policy.quasi_id_fields)? {
        let ok = class.len() >= policy.k
            && class_is_l_diverse(class.iter().map(|&i| sensitive[i][0].as_str()), policy.l);
        if !ok {
            out.extend(class);
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Applies `levels` (one per quasi-id field) to every record.
pub fn apply_levels(records: &[Fields], policy: &AnonymizationPolicy, levels: &[usize]) -> Vec<Fields> {
    records
        .iter()
        .map(|r| {
            let mut out = r.clone();
            for (field, &level) in policy.quasi_id_fields.iter().zip(levels) {
                if let Some(v) = out.get_mut(field) {
                    *v = policy.hierarchy(field).generalize(v, level);
                }
            }
            out
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generalized {
    pub records: Vec<Fields>,
    pub levels: Vec<usize>,
    /// Input indices that survived, in input order.
    pub kept: Vec<usize>,
    pub suppressed: usize,
}

/// Greedy full-domain generalization. Each step raises the field whose
/// increment leaves the fewest violating records (ties go to the leftmost
/// field). With every field at its top level, violating classes are
/// suppressed, unless that would drop more than half the records.
pub fn generalize_to_policy(records: &[Fields], policy: &AnonymizationPolicy) -> Result<Generalized, AnonymizerError> {
    policy.validate()?;
    projection(records, &policy.quasi_id_fields)?;
    projection(records, &[policy.sensitive_field.clone()])?;

    let max = policy.max_levels();
    let mut levels = vec![0; max.len()];
    loop {
        let current = apply_levels(records, policy, &levels);
        let violating = violating_records(&current, policy)?;
        if violating.is_empty() {
            return Ok(Generalized {
                records: current,
                levels,
                kept: (0..records.len()).collect(),
                suppressed: 0,
            });
        }

        let mut best: Option<(usize, usize)> = None;
        for f in 0..levels.len() {
            if levels[f] >= max[f] {
                continue;
            }
            let mut trial = levels.clone();
            trial[f] += 1;
            let count = violating_records(&apply_levels(records, policy, &trial), policy)?.len();
            if best.is_none_or(|(_, c)| count < c) {
                best = Some((f, count));
            }
        }

        match best {
            Some((f, _)) => levels[f] += 1,
            None => {
                if violating.len() * 2 > records.len() {
                    return Err(AnonymizerError::Infeasible);
                }
                let dropped: BTreeSet<usize> = violating.into_iter().collect();
                let kept: Vec<usize> = (0..records.len()).filter(|i| !dropped.contains(i)).collect();
                return Ok(Generalized {
                    records: kept.iter().map(|&i| current[i].clone()).collect(),
                    levels,
                    suppressed: dropped.len(),
                    kept,
                });
            }
        }
    }
}

/// What the researcher receives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Release {
    pub study: String,
    pub quasi_id_fields: Vec<String>,
    pub sensitive_field: String,
    pub k: usize,
    pub l: f64,
    pub levels: Vec<usize>,
    pub hierarchies: BTreeMap<String, Hierarchy>,
    pub records: Vec<Fields>,
    pub suppressed: usize,
}

impl Release {
    /// Raw records that skipped the anonymizer, framed as a release at
    /// level 0 with vacuous gates.
    pub fn unfiltered(study: &str, quasi_id_fields: &[String], records: Vec<Fields>) -> Self {
        Self {
            study: study.to_string(),
            quasi_id_fields: quasi_id_fields.to_vec(),
            sensitive_field: String::new(),
            k: 1,
            l: 1.0,
            levels: vec![0; quasi_id_fields.len()],
            hierarchies: BTreeMap::new(),
            records,
            suppressed: 0,
        }
    }

    pub fn policy(&self) -> AnonymizationPolicy {
        AnonymizationPolicy {
            k: self.k,
            l: self.l,
            quasi_id_fields: self.quasi_id_fields.clone(),
            sensitive_field: self.sensitive_field.clone(),
            hierarchies: self.hierarchies.clone(),
        }
    }

    /// Re-runs both gates on the released records.
    pub fn passes_gates(&self) -> bool {
        let qids = &self.quasi_id_fields;
        check_k_anonymity(&self.records, qids, self.k).unwrap_or(false)
            && entropy_l_diversity(&self.records, qids, &self.sensitive_field, self.l).unwrap_or(false)
    }

    /// `value` of `field` generalized to this release's level.
    pub fn generalize(&self, field: &str, value: &str) -> Option<String> {
        let at = self.quasi_id_fields.iter().position(|f| f == field)?;
        Some(self.policy().hierarchy(field).generalize(value, self.levels[at]))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReleaseError {
    #[error("pool holds {size} submissions, fewer than the minimum {min}")]
    TooSmall { size: usize, min: usize },
    #[error("gates cannot be met")]
    Infeasible,
}

/// Decrypted submissions for one study. Never leaves the anonymizer except
/// through [`SubmissionPool::release_batch`].
#[derive(Debug, Clone)]
pub struct SubmissionPool {
    policy: AnonymizationPolicy,
    min_pool_size: usize,
    entries: Vec<(Scope, Fields)>,
}

impl SubmissionPool {
    pub fn new(policy: AnonymizationPolicy, min_pool_size: usize) -> Self {
        Self {
            policy,
            min_pool_size,
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, origin: Scope, record: Fields) {
        self.entries.push((origin, record));
    }

    /// Every submission counts, including empty ones.
    pub fn size(&self) -> usize {
        self.entries.len()
    }

    pub fn policy(&self) -> &AnonymizationPolicy {
        &self.policy
    }

    /// Generalizes the pool to the policy, then shuffles what passes. Submissions without the
    /// sensitive field count toward the pool size but are not released.
    /// Only quasi-identifiers and the sensitive field are released.
    pub fn release_batch<R: Rng>(&self, study: &str, rng: &mut R) -> Result<(Release, Vec<Scope>), ReleaseError> {
        if self.size() < self.min_pool_size {
            return Err(ReleaseError::TooSmall {
                size: self.size(),
                min: self.min_pool_size,
            });
        }
        let policy = &self.policy;
        let mut origins = Vec::new();
        let mut working = Vec::new();
        for (origin, record) in &self.entries {
            let Some(sensitive) = record.get(&policy.sensitive_field) else {
                continue;
            };
            let mut row = Fields::new();
            for f in &policy.quasi_id_fields {
                let v = record.get(f).cloned().unwrap_or_else(|| SUPPRESSED.to_string());
                row.insert(f.clone(), v);
            }
            row.insert(policy.sensitive_field.clone(), sensitive.clone());
            row.retain(|k, _| !is_explicit_id(k));
            origins.push(origin.clone());
            working.push(row);
        }
        let g = generalize_to_policy(&working, policy).map_err(|_| ReleaseError::Infeasible)?;
        let mut rows: Vec<(Scope, Fields)> = g
            .kept
            .iter()
            .map(|&i| origins[i].clone())
            .zip(g.records)
            .collect();
        rows.shuffle(rng);
        let (included, records): (Vec<Scope>, Vec<Fields>) = rows.into_iter().unzip();
        Ok((
            Release {
                study: study.to_string(),
                quasi_id_fields: policy.quasi_id_fields.clone(),
                sensitive_field: policy.sensitive_field.clone(),
                k: policy.k,
                l: policy.l,
                levels: g.levels,
                hierarchies: policy.hierarchies.clone(),
                records,
                suppressed: g.suppressed,
            },
            included,
        ))
    }
}
