//! Random small scenarios: every invariant holds, reruns match, and the
//! records format round-trips.

use proptest::prelude::*;

use dapriv::report::{emit, parse_records, EmitFormat};
use dapriv::scenario::{parse_scenario, run, Tamper};

const LABS: [&str; 3] = ["D1#L1", "D1#L2", "D2#L3"];

#[derive(Debug, Clone)]
enum Step {
    Lab { patient: usize, lab: usize, tamper: Option<usize> },
    Rounds(usize),
    Study { consent: f64, bypass: bool },
    Deposit(usize),
    Access { patient: usize, intruder: bool },
}

fn step(patients: usize, labs: usize) -> impl Strategy<Value = Step> {
    prop_oneof![
        4 => (0..patients, 0..labs, proptest::option::weighted(0.3, 0..Tamper::ALL.len()))
            .prop_map(|(patient, lab, tamper)| Step::Lab { patient, lab, tamper }),
        1 => (1usize..3).prop_map(Step::Rounds),
        1 => (0.0f64..=1.0, proptest::bool::weighted(0.2)).prop_map(|(consent, bypass)| Step::Study { consent, bypass }),
        1 => (0..patients).prop_map(Step::Deposit),
        2 => (0..patients, any::<bool>()).prop_map(|(patient, intruder)| Step::Access { patient, intruder }),
    ]
}

fn render(seed: u64, patients: usize, labs: usize, coalition: &[String], steps: &[Step]) -> String {
    let mut t = format!("seed = {seed}\n[population]\npatients = {patients}\nphysicians = 2\n");
    t += "[key_pool]\nprivate_keys = 2\nsubkeys_per_private = 2\npublic_threshold = 2\nprivate_threshold = 3\n";
    t += "[directory]\nlabs = [";
    for lab in &LABS[..labs] {
        t += &format!("{{ ref = \"{lab}\", tests = [\"glucose\"] }}, ");
    }
    t += "]\nresearchers = [{ ref = \"D2#R1\", studies = [\"s\"] }]\n";
    t += "[anonymizer]\nk = 2\nl = 1.0\nmin_pool_size = 2\n";
    t += &format!("[adversary]\ncoalition = {coalition:?}\n");
    for s in steps {
        t += "[[schedule]]\n";
        t += &match s {
            Step::Lab { patient, lab, tamper } => {
                let mut x = format!("kind = \"lab_flow\"\npatient = {patient}\nlab = \"{}\"\n", LABS[*lab]);
                if let Some(i) = tamper {
                    x += &format!("tamper = \"{}\"\n", Tamper::ALL[*i].label());
                }
                x
            }
            Step::Rounds(r) => format!("kind = \"lab_rounds\"\nrounds = {r}\n"),
            Step::Study { consent, bypass } => format!(
                "kind = \"research\"\nresearcher = \"D2#R1\"\nstudy = \"s\"\nconsent_fraction = {consent}\n\
                 share = [\"zip\", \"gender\", \"diagnosis\", \"glucose\"]\nbypass_anonymizer = {bypass}\n"
            ),
            Step::Deposit(p) => format!("kind = \"emergency_deposit\"\npatient = {p}\n"),
            Step::Access { patient, intruder } => format!(
                "kind = \"emergency_access\"\npatient = {patient}\naccessor = \"{}\"\n",
                if *intruder { "intruder" } else { "contact" }
            ),
        };
    }
    t
}

fn scenario_text() -> impl Strategy<Value = String> {
    (1usize..5, 1usize..=3, 0..i64::MAX as u64)
        .prop_flat_map(|(patients, labs, seed)| {
            let members = prop_oneof![
                Just("lab:D1#L1".to_string()),
                Just("researcher:D2#R1".to_string()),
                Just("physician:0".to_string()),
                Just("intruder".to_string()),
            ];
            (
                Just((patients, labs, seed)),
                proptest::collection::btree_set(members, 0..3),
                proptest::collection::vec(step(patients, labs), 1..6),
            )
        })
        .prop_map(|((patients, labs, seed), coalition, steps)| {
            let coalition: Vec<String> = coalition.into_iter().collect();
            render(seed, patients, labs, &coalition, &steps)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn invariants_hold_and_reruns_match(text in scenario_text()) {
        let s = parse_scenario(&text).map_err(|e| TestCaseError::fail(format!("{e}\n{text}")))?;
        let report = run(&s);
        let bad: Vec<_> = report.violations().map(|v| format!("{}: {}", v.name, v.detail)).collect();
        prop_assert!(bad.is_empty(), "{bad:?}\n{text}");
        prop_assert_eq!(&run(&s), &report);
        let back = parse_records(&emit(&report, EmitFormat::Records)).unwrap();
        prop_assert_eq!(back, report);
    }
}
