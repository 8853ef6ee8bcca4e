use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::protocol::emergency::SnapshotHandle;
use crate::protocol::record::{ExplicitIds, Fields, MedicalRecord, QuasiIds, DIAGNOSIS};
use crate::rng::SimRng;

const FIRST: [&str; 8] = ["Ada", "Ben", "Chloe", "Dev", "Elif", "Femi", "Grace", "Hugo"];
const LAST: [&str; 8] = ["Alvarez", "Brown", "Chen", "Dubois", "Eze", "Fischer", "Gupta", "Haddad"];
const ZIPS: [&str; 6] = ["02138", "02139", "02141", "02142", "02143", "02144"];
const DIAGNOSES: [&str; 5] = ["asthma", "diabetes", "hypertension", "influenza", "migraine"];

/// Ground truth for one synthetic patient.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientProfile {
    pub index: usize,
    pub ids: ExplicitIds,
    pub quasi: QuasiIds,
    pub diagnosis: String,
    /// A true value for every test type some lab offers.
    pub physiology: Fields,
    pub emergency_handle: SnapshotHandle,
}

impl PatientProfile {
    pub fn record(&self) -> MedicalRecord {
        let mut sensitive = self.physiology.clone();
        sensitive.insert(DIAGNOSIS.to_string(), self.diagnosis.clone());
        MedicalRecord::new(self.ids.clone(), self.quasi.clone(), sensitive)
    }
}

/// `n` patients with distinct national ids and emergency handles.
pub fn generate_population(n: usize, tests: &BTreeSet<String>, rng: &mut SimRng) -> Vec<PatientProfile> {
    let mut ssns = BTreeSet::new();
    let mut handles = BTreeSet::new();
    (0..n)
        .map(|index| {
            let ssn = loop {
                let s = format!(
                    "{:03}-{:02}-{:04}",
                    rng.gen_range(100..900),
                    rng.gen_range(10..100),
                    rng.gen_range(1000..10000)
                );
                if ssns.insert(s.clone()) {
                    break s;
                }
            };
            let handle = loop {
                let h = format!("eh-{}", hex::encode(rng.gen::<[u8; 8]>()));
                if handles.insert(h.clone()) {
                    break SnapshotHandle(h);
                }
            };
            let name = format!(
                "{} {}",
                FIRST.choose(rng).expect("non-empty"),
                LAST.choose(rng).expect("non-empty")
            );
            let quasi = QuasiIds {
                birth_date: format!(
                    "{}-{:02}-{:02}",
                    rng.gen_range(1940..=2005),
                    rng.gen_range(1..=12),
                    rng.gen_range(1..=28)
                ),
                zip: ZIPS.choose(rng).expect("non-empty").to_string(),
                gender: if rng.gen_bool(0.5) { "F" } else { "M" }.to_string(),
            };
            let diagnosis = DIAGNOSES.choose(rng).expect("non-empty").to_string();
            let physiology = tests
                .iter()
                .map(|t| (t.clone(), rng.gen_range(40..200).to_string()))
                .collect();
            PatientProfile {
                index,
                ids: ExplicitIds {
                    name,
                    national_id: ssn,
                },
                quasi,
                diagnosis,
                physiology,
                emergency_handle: handle,
            }
        })
        .collect()
}
