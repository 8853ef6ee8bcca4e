//! Builds a world from a scenario and drives its schedule.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;

use crate::adversary::{
    analytic_linkage_rate, collude_join, enrichment, harvest_shards, linked_patients, precision, quasi_id_linkage,
    reassembly_rate, AdversaryMetrics, Profile, Shard,
};
use crate::anonymizer::{AnonymizerNode, Release};
use crate::coordination::{
    AuthServerNode, Broker, DirectoryEntry, DirectoryNode, DirectoryRef, DirectoryRegistry, EntryKind, StoreItem,
};
use crate::crypto::{EncryptionKey, EncryptionKeypair, SigningIdentity};
use crate::key_pool::create_pool;
use crate::protocol::messages::Payload;
use crate::protocol::nodes::{
    AccessorNode, EmergencyServerNode, LabNode, PatientNode, PatientSetup, PhysicianNode, ResearcherNode,
    ResultStoreNode, TokenMode,
};
use crate::protocol::record::RecordVault;
use crate::report::{FlowOutcome, FlowStatus, RunReport};
use crate::rng::SeedTree;
use crate::sim::{
    Audit, EntityId, EntityKind, EventLog, Fault, FaultAction, FollowUp, Pki, PkiEntry, Scope, Signal, StorageFault,
    WireFault, World,
};

use super::invariants::{check_all, Facts};
use super::population::{generate_population, PatientProfile};
use super::{AccessorSpec, FlowSpec, Scenario, Tamper};

/// Per-flow delivery budget. Honest flows need a few dozen steps.
const MAX_STEPS: usize = 1_000_000;

/// A finished run: the report plus what it was computed from.
pub struct RunArtifacts {
    pub report: RunReport,
    pub log: EventLog,
    pub audit: Audit,
    pub truth: BTreeMap<Scope, EntityId>,
}

pub fn run(scenario: &Scenario) -> RunReport {
    run_with_log(scenario).report
}

/// Runs `scenario`, which must already be valid.
pub fn run_with_log(scenario: &Scenario) -> RunArtifacts {
    let mut harness = Harness::build(scenario);
    for (index, flow) in scenario.schedule.iter().enumerate() {
        harness.run_flow(index, flow);
    }
    harness.finish()
}

#[derive(Debug, Clone)]
pub(super) struct LabRun {
    pub patient: EntityId,
    pub tamper: Option<Tamper>,
    pub fired: bool,
    pub status: FlowStatus,
    pub issued: Option<String>,
    pub delivered: Option<String>,
}

#[derive(Debug, Clone)]
pub(super) struct Consent {
    /// Logical time the grant was handed to the patient; it replaces any
    /// earlier grant for the same study.
    pub since: u64,
    pub bypass: bool,
    pub share: BTreeSet<String>,
}

/// Every grant, oldest first, keyed by (researcher, study) then patient.
pub(super) type ConsentLedger = BTreeMap<(EntityId, String), BTreeMap<EntityId, Vec<Consent>>>;

struct Harness<'a> {
    scenario: &'a Scenario,
    seeds: SeedTree,
    world: World,
    population: Vec<PatientProfile>,
    intruder_key: EncryptionKey,
    flows: Vec<FlowOutcome>,
    lab_runs: Vec<LabRun>,
    consents: ConsentLedger,
}

fn keys_for(seeds: &SeedTree, id: &EntityId) -> (SigningIdentity, EncryptionKeypair) {
    let mut rng = seeds.substream(&format!("keys/{id}"));
    let identity = SigningIdentity::from_rng(&mut rng, id.as_str());
    let keys = EncryptionKeypair::from_rng(&mut rng);
    (identity, keys)
}

fn register(pki: &mut Pki, id: &EntityId, kind: EntityKind, identity: &SigningIdentity, enc: Option<EncryptionKey>) {
    pki.register(
        id.clone(),
        PkiEntry {
            kind,
            verifying: identity.public(),
            encryption: enc,
        },
    );
}

fn carries_key(p: &Payload) -> bool {
    matches!(p, Payload::StoreWrite { item: StoreItem::PublicKey(_), .. })
}

fn carries_sealed(p: &Payload) -> bool {
    matches!(p, Payload::StoreWrite { item: StoreItem::Sealed(_), .. })
}

fn any_payload(_: &Payload) -> bool {
    true
}

fn fault_for(tamper: Tamper, intruder_key: EncryptionKey) -> Fault {
    let (message_type, receiver_kind, only_if, action): (&'static str, EntityKind, fn(&Payload) -> bool, FaultAction) =
        match tamper {
            Tamper::FlipPrescriptionByte => (
                "authorize_lab_session",
                EntityKind::AuthServer,
                any_payload,
                FaultAction::Wire(WireFault::FlipPrescriptionByte),
            ),
            Tamper::SubstituteStoreKey => (
                "store_write",
                EntityKind::AuthServer,
                carries_key,
                FaultAction::Storage(StorageFault::SubstituteKey(intruder_key)),
            ),
            Tamper::MutatePointer => (
                "store_write",
                EntityKind::AuthServer,
                carries_sealed,
                FaultAction::Storage(StorageFault::FlipSealedBit),
            ),
            Tamper::MutateHandoff => (
                "result_handoff",
                EntityKind::Physician,
                any_payload,
                FaultAction::Wire(WireFault::FlipEnvelopeBit),
            ),
            Tamper::MutateResultBlob => (
                "blob_put",
                EntityKind::ResultStore,
                any_payload,
                FaultAction::Storage(StorageFault::FlipBlobBit),
            ),
        };
    let follow_up = (tamper == Tamper::SubstituteStoreKey).then(|| (EntityId::intruder(), FollowUp::ProbeSession));
    Fault {
        label: tamper.label().to_string(),
        message_type,
        receiver_kind,
        only_if,
        action,
        follow_up,
    }
}

impl<'a> Harness<'a> {
    fn build(s: &'a Scenario) -> Self {
        let seeds = SeedTree::new(s.seed);
        let population = generate_population(s.population.patients, &s.test_types(), &mut seeds.substream("population"));
        let mut pki = Pki::default();
        let mut nodes: Vec<(EntityId, Box<dyn crate::sim::Node>)> = Vec::new();
        let rng_for = |id: &EntityId| seeds.substream(&format!("node/{id}"));

        let physicians: Vec<EntityId> = (0..s.population.physicians).map(EntityId::physician).collect();
        for (j, id) in physicians.iter().enumerate() {
            let (identity, keys) = keys_for(&seeds, id);
            register(&mut pki, id, EntityKind::Physician, &identity, Some(keys.public));
            let roster = (0..s.population.patients)
                .filter(|i| i % physicians.len() == j)
                .map(EntityId::patient)
                .collect();
            nodes.push((id.clone(), Box::new(PhysicianNode::new(identity, keys, roster, rng_for(id)))));
        }

        let designate = s.population.designate_emergency_contacts;
        for profile in &population {
            let id = EntityId::patient(profile.index);
            let (identity, _) = keys_for(&seeds, &id);
            register(&mut pki, &id, EntityKind::Patient, &identity, None);
            let pool = create_pool(s.key_pool, seeds.substream(&format!("pool/{id}"))).expect("pool params validated");
            let contact = designate.then(|| EntityId::contact(profile.index));
            nodes.push((
                id.clone(),
                Box::new(PatientNode::new(PatientSetup {
                    id: id.clone(),
                    identity,
                    pool,
                    vault: RecordVault::new(profile.record()),
                    mode: s.adversary.token_mode,
                    emergency_handle: profile.emergency_handle.clone(),
                    contact: contact.clone(),
                    rng: rng_for(&id),
                })),
            ));
            if let Some(contact) = contact {
                let (identity, keys) = keys_for(&seeds, &contact);
                register(&mut pki, &contact, EntityKind::EmergencyContact, &identity, Some(keys.public));
                nodes.push((contact, Box::new(AccessorNode::new(identity, keys, Some(id)))));
            }
        }

        let mut registry = DirectoryRegistry::default();
        for lab in &s.directory.labs {
            let id = EntityId::lab(&lab.reference);
            let (identity, keys) = keys_for(&seeds, &id);
            register(&mut pki, &id, EntityKind::Lab, &identity, Some(keys.public));
            registry
                .register_entry(DirectoryEntry {
                    reference: lab.reference.clone(),
                    kind: EntryKind::Lab,
                    capabilities: lab.tests.clone(),
                    public_key: identity.public(),
                    encryption_key: Some(keys.public),
                })
                .expect("refs validated unique");
            nodes.push((id.clone(), Box::new(LabNode::new(identity, rng_for(&id)))));
        }
        for r in &s.directory.researchers {
            let id = EntityId::researcher(&r.reference);
            let (identity, keys) = keys_for(&seeds, &id);
            register(&mut pki, &id, EntityKind::Researcher, &identity, Some(keys.public));
            registry
                .register_entry(DirectoryEntry {
                    reference: r.reference.clone(),
                    kind: EntryKind::Researcher,
                    capabilities: r.studies.clone(),
                    public_key: identity.public(),
                    encryption_key: Some(keys.public),
                })
                .expect("refs validated unique");
            nodes.push((
                id,
                Box::new(ResearcherNode::new(r.reference.clone(), keys, physicians.clone())),
            ));
        }
        for dir in registry.directories() {
            let id = EntityId::directory(dir.id());
            let (identity, _) = keys_for(&seeds, &id);
            register(&mut pki, &id, EntityKind::Directory, &identity, None);
            nodes.push((id, Box::new(DirectoryNode::new(dir.clone()))));
        }

        let auth = EntityId::auth();
        let (identity, _) = keys_for(&seeds, &auth);
        register(&mut pki, &auth, EntityKind::AuthServer, &identity, None);
        nodes.push((auth.clone(), Box::new(AuthServerNode::new(Broker::new(auth.clone(), rng_for(&auth))))));

        let anonymizer = EntityId::anonymizer();
        let (identity, keys) = keys_for(&seeds, &anonymizer);
        register(&mut pki, &anonymizer, EntityKind::Anonymizer, &identity, Some(keys.public));
        nodes.push((
            anonymizer.clone(),
            Box::new(AnonymizerNode::new(
                identity,
                keys,
                s.anonymizer.policy(),
                s.anonymizer.min_pool_size,
                rng_for(&anonymizer),
            )),
        ));

        for (id, kind) in [
            (EntityId::result_store(), EntityKind::ResultStore),
            (EntityId::emergency_server(), EntityKind::EmergencyServer),
        ] {
            let (identity, _) = keys_for(&seeds, &id);
            register(&mut pki, &id, kind, &identity, None);
        }
        nodes.push((EntityId::result_store(), Box::new(ResultStoreNode::new())));
        nodes.push((EntityId::emergency_server(), Box::new(EmergencyServerNode::new())));

        let intruder = EntityId::intruder();
        let (identity, keys) = keys_for(&seeds, &intruder);
        let intruder_key = keys.public;
        register(&mut pki, &intruder, EntityKind::Intruder, &identity, Some(intruder_key));
        nodes.push((intruder, Box::new(AccessorNode::new(identity, keys, None))));

        let mut world = World::new(pki);
        for (id, node) in nodes {
            world.add_node(id, node);
        }
        Self {
            scenario: s,
            seeds,
            world,
            population,
            intruder_key,
            flows: Vec::new(),
            lab_runs: Vec::new(),
            consents: ConsentLedger::new(),
        }
    }

    fn run_flow(&mut self, index: usize, flow: &FlowSpec) {
        let s = self.scenario;
        match flow {
            FlowSpec::LabFlow {
                patient,
                lab,
                tests,
                tamper,
            } => {
                let tests = tests
                    .clone()
                    .unwrap_or_else(|| s.lab_tests(lab).cloned().unwrap_or_default());
                let mut label = format!("{} -> {lab}", EntityId::patient(*patient));
                if let Some(t) = tamper {
                    label.push_str(&format!(" [{}]", t.label()));
                }
                self.lab_visit(index, flow.kind(), *patient, lab, tests, *tamper, label);
            }
            FlowSpec::LabRounds { rounds } => {
                let labs = s.lab_refs();
                for r in 0..*rounds {
                    for i in 0..s.population.patients {
                        let lab = &labs[(i + r) % labs.len()];
                        let tests = s.lab_tests(lab).cloned().unwrap_or_default();
                        let label = format!("{} -> {lab} (round {r})", EntityId::patient(i));
                        self.lab_visit(index, flow.kind(), i, lab, tests, None, label);
                    }
                }
            }
            FlowSpec::Research {
                researcher,
                study,
                consent_fraction,
                consenting,
                share,
                bypass_anonymizer,
            } => {
                let who = self.consenting(index, consenting.as_deref(), *consent_fraction);
                self.research(index, researcher, study, &who, share, *bypass_anonymizer);
            }
            FlowSpec::EmergencyDeposit { patient } => self.emergency_deposit(index, *patient),
            FlowSpec::EmergencyAccess { patient, accessor } => self.emergency_access(index, *patient, *accessor),
        }
    }

    fn settle(&mut self) -> Vec<(EntityId, Signal)> {
        self.world.run_until_quiet(MAX_STEPS);
        self.world.take_signals()
    }

    fn outcome(&mut self, index: usize, kind: &str, label: String, status: FlowStatus, detail: BTreeMap<String, String>) {
        self.flows.push(FlowOutcome {
            index,
            kind: kind.to_string(),
            label,
            status,
            detail,
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn lab_visit(
        &mut self,
        index: usize,
        kind: &str,
        patient: usize,
        lab: &DirectoryRef,
        tests: BTreeSet<String>,
        tamper: Option<Tamper>,
        label: String,
    ) {
        let pid = EntityId::patient(patient);
        let physician = EntityId::physician(patient % self.scenario.population.physicians);
        if let Some(t) = tamper {
            self.world.arm(fault_for(t, self.intruder_key));
        }
        self.world.post(pid.clone(), Payload::PlanLabVisit { lab: lab.clone() });
        self.world.post(
            physician,
            Payload::Consult {
                patient: pid.clone(),
                ids: self.population[patient].ids.clone(),
                tests,
            },
        );
        let signals = self.settle();
        let fired = tamper.is_some() && self.world.disarm_all().is_empty();

        let mut aborted = None;
        let (mut issued, mut delivered, mut key_used) = (None, None, false);
        for (who, signal) in signals {
            match signal {
                Signal::Aborted { reason } => {
                    aborted.get_or_insert((who, reason));
                }
                Signal::ResultIssued { digest } => issued = Some(digest),
                Signal::ResultDelivered { digest } => delivered = Some(digest),
                Signal::KeyUseRecorded { .. } => key_used = true,
                _ => {}
            }
        }
        let mut detail = BTreeMap::new();
        let status = match aborted {
            Some((who, reason)) => {
                detail.insert("aborted_by".to_string(), who.to_string());
                FlowStatus::Aborted {
                    reason: reason.to_string(),
                }
            }
            None if delivered.is_some() && key_used => FlowStatus::Completed,
            None => FlowStatus::Incomplete,
        };
        if let Some(d) = &issued {
            detail.insert("lab_digest".to_string(), d.clone());
        }
        if let Some(d) = &delivered {
            detail.insert("physician_digest".to_string(), d.clone());
        }
        if let Some(t) = tamper {
            detail.insert("tamper".to_string(), t.label().to_string());
            detail.insert("fault_fired".to_string(), fired.to_string());
        }
        self.lab_runs.push(LabRun {
            patient: pid,
            tamper,
            fired,
            status: status.clone(),
            issued,
            delivered,
        });
        self.outcome(index, kind, label, status, detail);
    }

    fn consenting(&self, index: usize, listed: Option<&[usize]>, fraction: Option<f64>) -> Vec<usize> {
        let n = self.scenario.population.patients;
        match (listed, fraction) {
            (Some(list), _) => list.iter().copied().collect::<BTreeSet<_>>().into_iter().collect(),
            (None, Some(f)) => {
                let mut all: Vec<usize> = (0..n).collect();
                all.shuffle(&mut self.seeds.substream(&format!("consent/{index}")));
                let take = ((f * n as f64).round() as usize).min(n);
                let mut picked = all[..take].to_vec();
                picked.sort_unstable();
                picked
            }
            (None, None) => (0..n).collect(),
        }
    }

    fn research(
        &mut self,
        index: usize,
        researcher: &DirectoryRef,
        study: &str,
        consenting: &[usize],
        share: &BTreeSet<String>,
        bypass: bool,
    ) {
        let rid = EntityId::researcher(researcher);
        let since = self.world.now();
        let ledger = self.consents.entry((rid.clone(), study.to_string())).or_default();
        for &p in consenting {
            let pid = EntityId::patient(p);
            ledger.entry(pid.clone()).or_default().push(Consent {
                since,
                bypass,
                share: share.clone(),
            });
            self.world.post(
                pid,
                Payload::SetConsent {
                    researcher: researcher.clone(),
                    study: study.to_string(),
                    share: share.clone(),
                    bypass,
                },
            );
        }
        self.world.post(rid, Payload::StartStudy { study: study.to_string() });
        let mut signals = self.settle();
        if !bypass {
            self.world.post(
                EntityId::anonymizer(),
                Payload::CloseStudy {
                    researcher: researcher.clone(),
                    study: study.to_string(),
                },
            );
            signals.extend(self.settle());
        }

        let (mut submitted, mut direct, mut refused) = (0usize, 0usize, 0usize);
        let (mut released, mut blocked, mut withheld) = (None, false, None);
        for (_, signal) in signals {
            match signal {
                Signal::Submitted { .. } => submitted += 1,
                Signal::DirectSubmissionReceived { .. } => direct += 1,
                Signal::ResearchRefused { .. } => refused += 1,
                Signal::ReleaseReceived { records, .. } => released = Some(records),
                Signal::ReleaseBlocked { .. } => blocked = true,
                Signal::ReleaseWithheld { pool, .. } => withheld = Some(pool),
                _ => {}
            }
        }
        let status = if bypass {
            if direct == consenting.len() {
                FlowStatus::Completed
            } else {
                FlowStatus::Incomplete
            }
        } else if released.is_some() {
            FlowStatus::Completed
        } else if blocked {
            FlowStatus::Withheld {
                reason: "privacy gates cannot be met".into(),
            }
        } else if refused > 0 && submitted == 0 {
            FlowStatus::Aborted {
                reason: "researcher not verified".into(),
            }
        } else if let Some(pool) = withheld {
            FlowStatus::Withheld {
                reason: format!("pool of {pool} is below the minimum {}", self.scenario.anonymizer.min_pool_size),
            }
        } else if submitted == 0 {
            FlowStatus::Withheld {
                reason: "no submissions".into(),
            }
        } else {
            FlowStatus::Incomplete
        };
        let mut detail: BTreeMap<String, String> = [
            ("consenting".to_string(), consenting.len().to_string()),
            ("bypass_anonymizer".to_string(), bypass.to_string()),
        ]
        .into();
        if bypass {
            detail.insert("direct_submissions".into(), direct.to_string());
        } else {
            detail.insert("submitted".into(), submitted.to_string());
        }
        if let Some(n) = released {
            detail.insert("released_records".into(), n.to_string());
        }
        let label = format!("{researcher} / {study}");
        self.outcome(index, "research", label, status, detail);
    }

    fn emergency_deposit(&mut self, index: usize, patient: usize) {
        let pid = EntityId::patient(patient);
        self.world.post(pid.clone(), Payload::DepositEmergency);
        let mut status = FlowStatus::Incomplete;
        let mut detail = BTreeMap::new();
        for (_, signal) in self.settle() {
            match signal {
                Signal::EmergencyDeposited { version } => {
                    status = FlowStatus::Completed;
                    detail.insert("version".to_string(), version.to_string());
                }
                Signal::EmergencyDepositRejected => {
                    status = FlowStatus::Aborted {
                        reason: "no designated emergency contact".into(),
                    }
                }
                _ => {}
            }
        }
        self.outcome(index, "emergency_deposit", pid.to_string(), status, detail);
    }

    fn emergency_access(&mut self, index: usize, patient: usize, accessor: AccessorSpec) {
        let pid = EntityId::patient(patient);
        let who = match accessor {
            AccessorSpec::Contact if self.scenario.population.designate_emergency_contacts => EntityId::contact(patient),
            AccessorSpec::Contact => {
                let status = FlowStatus::Aborted {
                    reason: "patient has no designated contact".into(),
                };
                return self.outcome(index, "emergency_access", format!("contact -> {pid}"), status, BTreeMap::new());
            }
            AccessorSpec::Intruder => EntityId::intruder(),
        };
        self.world.post(
            who.clone(),
            Payload::AccessEmergency {
                handle: self.population[patient].emergency_handle.clone(),
            },
        );
        let (mut opened, mut notice) = (false, None);
        for (_, signal) in self.settle() {
            match signal {
                Signal::EmergencyOpened => opened = true,
                Signal::EmergencyNoticeReceived { flag_raised } => notice = Some(flag_raised),
                _ => {}
            }
        }
        let mut detail: BTreeMap<String, String> = [("opened".to_string(), opened.to_string())].into();
        let status = match notice {
            Some(flag) => {
                detail.insert("flag_raised".into(), flag.to_string());
                FlowStatus::Completed
            }
            None => FlowStatus::Aborted {
                reason: "no snapshot on file".into(),
            },
        };
        self.outcome(index, "emergency_access", format!("{who} -> {pid}"), status, detail);
    }

    fn metrics(&self, audit: &Audit) -> Option<(AdversaryMetrics, Vec<Shard>)> {
        let s = self.scenario;
        if s.adversary.coalition.is_empty() {
            return None;
        }
        let coalition: BTreeSet<EntityId> = s.adversary.coalition.iter().cloned().collect();
        let shards = harvest_shards(self.world.log(), &coalition, self.world.truth());
        let profiles = collude_join(&shards);
        let patients: BTreeSet<EntityId> = (0..s.population.patients).map(EntityId::patient).collect();
        let linked = linked_patients(&profiles);
        let releases: Vec<Release> = audit
            .releases_received
            .iter()
            .filter(|(r, _)| coalition.contains(r))
            .map(|(_, r)| r.clone())
            .collect();
        let reidentified = (!releases.is_empty()).then(|| {
            // A release record trivially matches itself; only profiles built
            // from some other observer's view count.
            let candidates: Vec<Profile> = profiles
                .iter()
                .filter(|p| p.shards.iter().any(|s| !s.observer.is(EntityKind::Researcher)))
                .cloned()
                .collect();
            quasi_id_linkage(&candidates, &releases).into_iter().filter(|b| *b).count()
        });
        let metrics = AdversaryMetrics {
            coalition: coalition.iter().cloned().collect(),
            shards: shards.len(),
            profiles: profiles.len(),
            patients: patients.len(),
            linked_patients: linked.intersection(&patients).count(),
            linkage_rate: reassembly_rate(&profiles, &patients),
            enrichment: enrichment(&profiles),
            precision: precision(&profiles),
            reidentified,
            analytic_linkage_rate: analytic_estimate(s),
        };
        Some((metrics, shards))
    }

    fn finish(self) -> RunArtifacts {
        let audit = self.world.audit();
        let metrics = self.metrics(&audit);
        let facts = Facts {
            scenario: self.scenario,
            log: self.world.log(),
            pki: self.world.pki(),
            truth: self.world.truth(),
            audit: &audit,
            lab_runs: &self.lab_runs,
            consents: &self.consents,
            undeliverable: self.world.undeliverable(),
            coalition_shards: metrics.as_ref().map(|(_, s)| s.as_slice()),
        };
        let invariants = check_all(&facts);
        let log = self.world.log().clone();
        let report = RunReport {
            seed: self.scenario.seed,
            flows: self.flows,
            metrics: metrics.map(|(m, _)| m),
            invariants,
            event_count: log.len(),
            log_digest: log.digest(),
        };
        RunArtifacts {
            report,
            log,
            audit,
            truth: self.world.truth().clone(),
        }
    }
}

/// The closed form applies to a single round-robin schedule over distinct
/// labs, all of them colluding, with keys at the desk and no tampering.
fn analytic_estimate(s: &Scenario) -> Option<f64> {
    let [FlowSpec::LabRounds { rounds }] = s.schedule.as_slice() else {
        return None;
    };
    let labs = s.lab_refs();
    let all_labs_collude = labs.iter().all(|l| s.adversary.coalition.contains(&EntityId::lab(l)));
    let eligible = *rounds <= labs.len() && all_labs_collude && s.adversary.token_mode == TokenMode::DaprivKeys;
    eligible.then(|| analytic_linkage_rate(s.key_pool, *rounds))
}
