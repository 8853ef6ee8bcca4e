//! Scenario files: what to build, what to run, who colludes.

mod invariants;
mod population;
mod run;
mod sweep;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::Deserialize;

use crate::anonymizer::{default_hierarchy, AnonymizationPolicy, Hierarchy};
use crate::coordination::DirectoryRef;
use crate::key_pool::PoolParams;
use crate::protocol::nodes::TokenMode;
use crate::protocol::record::{DIAGNOSIS, EXPLICIT_ID_FIELDS, QUASI_ID_FIELDS};
use crate::sim::EntityId;

pub use population::{generate_population, PatientProfile};
pub use run::{run, run_with_log, RunArtifacts};
pub use sweep::{run_sweep, SweepParam, SweepSpec};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    #[serde(default)]
    pub population: PopulationSpec,
    #[serde(default)]
    pub key_pool: PoolParams,
    #[serde(default)]
    pub directory: DirectorySpec,
    #[serde(default)]
    pub schedule: Vec<FlowSpec>,
    #[serde(default)]
    pub anonymizer: AnonymizerSpec,
    #[serde(default)]
    pub adversary: AdversarySpec,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationSpec {
    pub patients: usize,
    pub physicians: usize,
    pub designate_emergency_contacts: bool,
}

impl Default for PopulationSpec {
    fn default() -> Self {
        Self {
            patients: 1,
            physicians: 1,
            designate_emergency_contacts: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DirectorySpec {
    pub labs: Vec<LabSpec>,
    pub researchers: Vec<ResearcherSpec>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabSpec {
    #[serde(rename = "ref")]
    pub reference: DirectoryRef,
    pub tests: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResearcherSpec {
    #[serde(rename = "ref")]
    pub reference: DirectoryRef,
    pub studies: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tamper {
    /// Flip a byte of the prescription on its way to the auth server.
    FlipPrescriptionByte,
    /// Overwrite the deposited public key with the intruder's, at rest.
    SubstituteStoreKey,
    /// Flip a bit of the sealed result pointer, at rest.
    MutatePointer,
    /// Flip a bit of the patient-to-physician envelope in flight.
    MutateHandoff,
    /// Flip a bit of the encrypted result blob, at rest.
    MutateResultBlob,
}

impl Tamper {
    pub fn label(self) -> &'static str {
        match self {
            Tamper::FlipPrescriptionByte => "flip_prescription_byte",
            Tamper::SubstituteStoreKey => "substitute_store_key",
            Tamper::MutatePointer => "mutate_pointer",
            Tamper::MutateHandoff => "mutate_handoff",
            Tamper::MutateResultBlob => "mutate_result_blob",
        }
    }

    pub const ALL: [Tamper; 5] = [
        Tamper::FlipPrescriptionByte,
        Tamper::SubstituteStoreKey,
        Tamper::MutatePointer,
        Tamper::MutateHandoff,
        Tamper::MutateResultBlob,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessorSpec {
    Contact,
    Intruder,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FlowSpec {
    LabFlow {
        patient: usize,
        lab: DirectoryRef,
        /// Defaults to everything the lab offers.
        #[serde(default)]
        tests: Option<BTreeSet<String>>,
        #[serde(default)]
        tamper: Option<Tamper>,
    },
    /// Every patient visits one lab per round; patient `i` goes to lab
    /// `(i + r) mod labs` in round `r`.
    LabRounds { rounds: usize },
    Research {
        researcher: DirectoryRef,
        study: String,
        #[serde(default)]
        consent_fraction: Option<f64>,
        #[serde(default)]
        consenting: Option<Vec<usize>>,
        share: BTreeSet<String>,
        #[serde(default)]
        bypass_anonymizer: bool,
    },
    EmergencyDeposit { patient: usize },
    EmergencyAccess { patient: usize, accessor: AccessorSpec },
}

impl FlowSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            FlowSpec::LabFlow { .. } => "lab_flow",
            FlowSpec::LabRounds { .. } => "lab_rounds",
            FlowSpec::Research { .. } => "research",
            FlowSpec::EmergencyDeposit { .. } => "emergency_deposit",
            FlowSpec::EmergencyAccess { .. } => "emergency_access",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnonymizerSpec {
    pub k: usize,
    pub l: f64,
    pub min_pool_size: usize,
    pub quasi_id_fields: Vec<String>,
    pub sensitive_field: String,
    pub hierarchies: BTreeMap<String, Hierarchy>,
}

impl Default for AnonymizerSpec {
    fn default() -> Self {
        Self {
            k: 2,
            l: 1.0,
            min_pool_size: 5,
            quasi_id_fields: QUASI_ID_FIELDS.iter().map(|s| s.to_string()).collect(),
            sensitive_field: DIAGNOSIS.to_string(),
            hierarchies: BTreeMap::new(),
        }
    }
}

impl AnonymizerSpec {
    /// Quasi-id fields without an explicit hierarchy get the default one.
    pub fn policy(&self) -> AnonymizationPolicy {
        let mut hierarchies = self.hierarchies.clone();
        for f in &self.quasi_id_fields {
            hierarchies.entry(f.clone()).or_insert_with(|| default_hierarchy(f));
        }
        AnonymizationPolicy {
            k: self.k,
            l: self.l,
            quasi_id_fields: self.quasi_id_fields.clone(),
            sensitive_field: self.sensitive_field.clone(),
            hierarchies,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarySpec {
    pub coalition: Vec<EntityId>,
    pub token_mode: TokenMode,
}

/// A scenario that could not be loaded. Always names the offending field,
/// and the line when it can be found.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioError {
    pub field: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}: `{}`: {}", self.field, self.message),
            None => write!(f, "`{}`: {}", self.field, self.message),
        }
    }
}

impl std::error::Error for ScenarioError {}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError {
        field: path.display().to_string(),
        line: None,
        message: e.to_string(),
    })?;
    parse_scenario(&text)
}

/// Parses and validates scenario TOML.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let scenario: Scenario = toml::from_str(text).map_err(|e| parse_error(text, &e))?;
    scenario.validate_with_source(Some(text))?;
    Ok(scenario)
}

fn parse_error(text: &str, e: &toml::de::Error) -> ScenarioError {
    let message = e.message().trim().to_string();
    let line = e.span().map(|s| line_at(text, s.start));
    let field = e
        .span()
        .map(|s| key_on_line(text, s.start).unwrap_or_else(|| text[s.start..s.end.min(text.len())].trim().to_string()))
        .filter(|s| !s.is_empty() && s.len() < 80)
        .or_else(|| backticked(&message))
        .unwrap_or_else(|| "scenario".to_string());
    ScenarioError { field, line, message }
}

/// The bare key of a `key = value` line containing `offset`.
fn key_on_line(text: &str, offset: usize) -> Option<String> {
    let offset = offset.min(text.len());
    let start = text[..offset].rfind('\n').map_or(0, |i| i + 1);
    let end = text[offset..].find('\n').map_or(text.len(), |i| offset + i);
    let (key, _) = text[start..end].split_once('=')?;
    let key = key.trim();
    let bare = !key.is_empty() && key.chars().all(|c| c.is_ascii_alphanumeric() || "_-.".contains(c));
    (bare && offset >= start + key.len()).then(|| key.to_string())
}

fn backticked(message: &str) -> Option<String> {
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(message[start..start + len].to_string())
}

fn line_at(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of the first match of the last anchor, found after each earlier
/// anchor in turn.
fn locate(text: &str, anchors: &[String]) -> Option<usize> {
    let lines: Vec<&str> = text.lines().collect();
    let mut at = 0;
    let mut found = None;
    for anchor in anchors {
        let hit = (at..lines.len()).find(|&i| lines[i].contains(anchor.as_str()))?;
        found = Some(hit + 1);
        at = hit + 1;
    }
    found
}

/// Fields a patient record can share.
pub fn record_fields(tests: impl IntoIterator<Item = String>) -> BTreeSet<String> {
    EXPLICIT_ID_FIELDS
        .iter()
        .chain(QUASI_ID_FIELDS.iter())
        .chain(std::iter::once(&DIAGNOSIS))
        .map(|s| s.to_string())
        .chain(tests)
        .collect()
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.validate_with_source(None)
    }

    pub fn lab_refs(&self) -> Vec<DirectoryRef> {
        self.directory.labs.iter().map(|l| l.reference.clone()).collect()
    }

    pub fn lab_tests(&self, lab: &DirectoryRef) -> Option<&BTreeSet<String>> {
        self.directory
            .labs
            .iter()
            .find(|l| &l.reference == lab)
            .map(|l| &l.tests)
    }

    /// Every test type some lab offers.
    pub fn test_types(&self) -> BTreeSet<String> {
        self.directory
            .labs
            .iter()
            .flat_map(|l| l.tests.iter().cloned())
            .collect()
    }

    /// Entity ids the built world will contain.
    pub fn entity_ids(&self) -> BTreeSet<EntityId> {
        let mut ids: BTreeSet<EntityId> = (0..self.population.patients).map(EntityId::patient).collect();
        ids.extend((0..self.population.physicians).map(EntityId::physician));
        if self.population.designate_emergency_contacts {
            ids.extend((0..self.population.patients).map(EntityId::contact));
        }
        ids.extend(self.directory.labs.iter().map(|l| EntityId::lab(&l.reference)));
        ids.extend(self.directory.researchers.iter().map(|r| EntityId::researcher(&r.reference)));
        ids.extend(self.directory_ids().iter().map(|d| EntityId::directory(d)));
        ids.extend([
            EntityId::auth(),
            EntityId::anonymizer(),
            EntityId::result_store(),
            EntityId::emergency_server(),
            EntityId::intruder(),
        ]);
        ids
    }

    pub fn directory_ids(&self) -> BTreeSet<String> {
        self.directory
            .labs
            .iter()
            .map(|l| &l.reference)
            .chain(self.directory.researchers.iter().map(|r| &r.reference))
            .map(|r| r.directory_id.clone())
            .collect()
    }

    fn validate_with_source(&self, source: Option<&str>) -> Result<(), ScenarioError> {
        let fail = |field: String, anchors: Vec<String>, message: String| ScenarioError {
            line: source.and_then(|s| locate(s, &anchors)),
            field,
            message,
        };
        let nth_flow = |i: usize| vec!["[[schedule]]".to_string(); i + 1];

        let pop = &self.population;
        if pop.patients > 0 && pop.physicians == 0 {
            return Err(fail(
                "population.physicians".into(),
                vec!["physicians".into()],
                "patients need at least one physician".into(),
            ));
        }
        self.key_pool.validate().map_err(|e| {
            fail(
                "key_pool".into(),
                vec!["[key_pool]".into()],
                e.to_string(),
            )
        })?;

        let mut refs = BTreeSet::new();
        for r in self.lab_refs().iter().chain(self.directory.researchers.iter().map(|r| &r.reference)) {
            if !refs.insert(r.clone()) {
                return Err(fail(
                    "directory".into(),
                    vec![r.to_string()],
                    format!("{r} is registered twice"),
                ));
            }
        }

        let shareable = record_fields(self.test_types());
        let patient_ok = |p: usize| p < pop.patients;
        for (i, flow) in self.schedule.iter().enumerate() {
            let field = |name: &str| format!("schedule[{i}].{name}");
            let at = |name: &str| {
                let mut a = nth_flow(i);
                a.push(name.to_string());
                a
            };
            match flow {
                FlowSpec::LabFlow { patient, lab, .. } => {
                    if !patient_ok(*patient) {
                        return Err(fail(field("patient"), at("patient"), format!("no patient {patient}")));
                    }
                    if self.lab_tests(lab).is_none() {
                        return Err(fail(field("lab"), at("lab"), format!("no lab {lab} in the directory")));
                    }
                }
                FlowSpec::LabRounds { .. } => {
                    if self.directory.labs.is_empty() {
                        return Err(fail(field("rounds"), at("rounds"), "no labs to visit".into()));
                    }
                }
                FlowSpec::Research {
                    researcher,
                    consent_fraction,
                    consenting,
                    share,
                    ..
                } => {
                    if !self.directory.researchers.iter().any(|r| &r.reference == researcher) {
                        return Err(fail(
                            field("researcher"),
                            at("researcher"),
                            format!("no researcher {researcher} in the directory"),
                        ));
                    }
                    if consent_fraction.is_some() && consenting.is_some() {
                        return Err(fail(
                            field("consenting"),
                            at("consenting"),
                            "give consent_fraction or consenting, not both".into(),
                        ));
                    }
                    if let Some(f) = consent_fraction {
                        if !(0.0..=1.0).contains(f) {
                            return Err(fail(
                                field("consent_fraction"),
                                at("consent_fraction"),
                                format!("{f} is not in [0, 1]"),
                            ));
                        }
                    }
                    if let Some(bad) = consenting.iter().flatten().find(|p| !patient_ok(**p)) {
                        return Err(fail(field("consenting"), at("consenting"), format!("no patient {bad}")));
                    }
                    if let Some(bad) = share.iter().find(|f| !shareable.contains(*f)) {
                        return Err(fail(field("share"), at("share"), format!("unknown record field `{bad}`")));
                    }
                }
                FlowSpec::EmergencyDeposit { patient } | FlowSpec::EmergencyAccess { patient, .. } => {
                    if !patient_ok(*patient) {
                        return Err(fail(field("patient"), at("patient"), format!("no patient {patient}")));
                    }
                }
            }
        }

        let policy = self.anonymizer.policy();
        policy
            .validate()
            .map_err(|e| fail("anonymizer".into(), vec!["[anonymizer]".into()], e.to_string()))?;
        if self.anonymizer.min_pool_size == 0 {
            return Err(fail(
                "anonymizer.min_pool_size".into(),
                vec!["min_pool_size".into()],
                "must be at least 1".into(),
            ));
        }
        for f in policy.quasi_id_fields.iter().chain([&policy.sensitive_field]) {
            if !shareable.contains(f) {
                return Err(fail(
                    "anonymizer".into(),
                    vec!["[anonymizer]".into(), f.clone()],
                    format!("unknown record field `{f}`"),
                ));
            }
        }

        let known = self.entity_ids();
        for member in &self.adversary.coalition {
            if !known.contains(member) {
                return Err(fail(
                    "adversary.coalition".into(),
                    vec![format!("\"{member}\"")],
                    format!("no entity `{member}` in this scenario"),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
