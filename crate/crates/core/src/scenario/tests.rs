use super::*;
use crate::report::FlowStatus;

const BASE: &str = r#"
seed = 7

[population]
patients = 6
physicians = 2

[key_pool]
private_keys = 2
subkeys_per_private = 2
public_threshold = 2
private_threshold = 8

[directory]
labs = [
  { ref = "D1#L1", tests = ["glucose", "hba1c"] },
  { ref = "D1#L2", tests = ["glucose"] },
  { ref = "D2#L3", tests = ["lipids"] },
]
researchers = [{ ref = "D2#R1", studies = ["diabetes-2026"] }]
"#;

fn with(extra: &str) -> Scenario {
    parse_scenario(&format!("{BASE}\n{extra}")).unwrap()
}

fn invalid(extra: &str) -> ScenarioError {
    parse_scenario(&format!("{BASE}\n{extra}")).unwrap_err()
}

fn assert_clean(report: &crate::report::RunReport) {
    let bad: Vec<_> = report.violations().collect();
    assert!(bad.is_empty(), "violations: {bad:#?}");
}

#[test]
fn defaults_fill_in() {
    let s = parse_scenario("seed = 1").unwrap();
    assert_eq!(s.population.patients, 1);
    assert!(s.population.designate_emergency_contacts);
    assert_eq!(s.key_pool, PoolParams::default());
    assert_eq!(s.anonymizer.min_pool_size, 5);
    assert!(s.schedule.is_empty());
}

#[test]
fn unknown_keys_are_rejected_with_a_line() {
    let err = invalid("[adversary]\ncoalition = []\ncolluders = 3\n");
    assert!(err.message.contains("colluders"), "{err}");
    assert_eq!(err.line, Some(BASE.lines().count() + 4));
}

#[test]
fn out_of_range_patient_names_field_and_line() {
    let err = invalid("[[schedule]]\nkind = \"lab_flow\"\nlab = \"D1#L1\"\npatient = 6\n");
    assert_eq!(err.field, "schedule[0].patient");
    assert_eq!(err.line, Some(BASE.lines().count() + 5));
    assert!(err.to_string().starts_with(&format!("line {}", BASE.lines().count() + 5)));
}

#[test]
fn unknown_lab_and_coalition_members_are_rejected() {
    let err = invalid("[[schedule]]\nkind = \"lab_flow\"\nlab = \"D9#L9\"\npatient = 0\n");
    assert_eq!(err.field, "schedule[0].lab");
    let err = invalid("[adversary]\ncoalition = [\"lab:D1#L9\"]\n");
    assert_eq!(err.field, "adversary.coalition");
    assert!(err.line.is_some());
}

#[test]
fn share_fields_must_exist() {
    let err = invalid(
        "[[schedule]]\nkind = \"research\"\nresearcher = \"D2#R1\"\nstudy = \"diabetes-2026\"\nshare = [\"blood_type\"]\n",
    );
    assert_eq!(err.field, "schedule[0].share");
}

#[test]
fn bad_policy_and_pool_are_rejected() {
    assert_eq!(invalid("[anonymizer]\nl = 0.5\n").field, "anonymizer");
    let zero = BASE.replace("public_threshold = 2", "public_threshold = 0");
    assert_eq!(parse_scenario(&zero).unwrap_err().field, "key_pool");
}

#[test]
fn oversized_numbers_name_their_key() {
    let err = parse_scenario("seed = 18446744073709551615\n").unwrap_err();
    assert_eq!(err.field, "seed");
    assert_eq!(err.line, Some(1));
}

#[test]
fn malformed_refs_fail_to_parse() {
    let err = parse_scenario(&BASE.replace("D1#L2", "L2")).unwrap_err();
    assert!(err.message.contains("DirectoryID#EntryID"), "{err}");
    assert!(err.line.is_some());
}

#[test]
fn honest_lab_flow_completes() {
    let s = with("[[schedule]]\nkind = \"lab_flow\"\npatient = 1\nlab = \"D1#L1\"\n");
    let report = run(&s);
    assert_eq!(report.flows.len(), 1);
    let flow = &report.flows[0];
    assert_eq!(flow.status, FlowStatus::Completed, "{flow:?}");
    assert_eq!(flow.detail["lab_digest"], flow.detail["physician_digest"]);
    assert_clean(&report);
}

#[test]
fn every_tamper_aborts_cleanly() {
    for t in Tamper::ALL {
        let s = with(&format!(
            "[[schedule]]\nkind = \"lab_flow\"\npatient = 0\nlab = \"D1#L1\"\ntamper = \"{}\"\n",
            t.label()
        ));
        let report = run(&s);
        assert!(
            matches!(report.flows[0].status, FlowStatus::Aborted { .. }),
            "{t:?}: {:?}",
            report.flows[0]
        );
        assert_eq!(report.flows[0].detail["fault_fired"], "true");
        assert_clean(&report);
    }
}

#[test]
fn tamper_is_confined_to_its_flow() {
    let s = with(concat!(
        "[[schedule]]\nkind = \"lab_flow\"\npatient = 0\nlab = \"D1#L1\"\ntamper = \"mutate_result_blob\"\n",
        "[[schedule]]\nkind = \"lab_flow\"\npatient = 0\nlab = \"D1#L2\"\n",
    ));
    let report = run(&s);
    assert_eq!(report.flows[0].status.label(), "aborted");
    assert_eq!(report.flows[1].status, FlowStatus::Completed);
    assert_clean(&report);
}

#[test]
fn lab_rounds_rotate_labs() {
    let s = with("[[schedule]]\nkind = \"lab_rounds\"\nrounds = 2\n");
    let report = run(&s);
    assert_eq!(report.flows.len(), 12);
    assert_eq!(report.count("completed"), 12);
    assert!(report.flows[0].label.contains("D1#L1"));
    assert!(report.flows[6].label.contains("D1#L2"));
    assert_clean(&report);
}

#[test]
fn research_releases_only_consented_records() {
    let s = with(concat!(
        "[anonymizer]\nk = 2\nl = 1.0\nmin_pool_size = 3\n",
        "[[schedule]]\nkind = \"research\"\nresearcher = \"D2#R1\"\nstudy = \"diabetes-2026\"\n",
        "consenting = [0, 2, 3, 5]\nshare = [\"birth_date\", \"zip\", \"gender\", \"diagnosis\"]\n",
    ));
    let run = run_with_log(&s);
    let flow = &run.report.flows[0];
    assert_eq!(flow.detail["submitted"], "4");
    assert!(matches!(flow.status, FlowStatus::Completed | FlowStatus::Withheld { .. }), "{flow:?}");
    assert_clean(&run.report);
    let patients: std::collections::BTreeSet<_> = run
        .truth
        .iter()
        .filter(|(scope, _)| matches!(scope, crate::sim::Scope::Submission { .. }))
        .map(|(_, p)| p.as_str().to_string())
        .collect();
    let expected: std::collections::BTreeSet<String> =
        ["patient:0", "patient:2", "patient:3", "patient:5"].iter().map(|s| s.to_string()).collect();
    assert_eq!(patients, expected);
}

#[test]
fn small_pools_are_withheld() {
    let s = with(concat!(
        "[anonymizer]\nmin_pool_size = 5\n",
        "[[schedule]]\nkind = \"research\"\nresearcher = \"D2#R1\"\nstudy = \"diabetes-2026\"\n",
        "consenting = [0, 1]\nshare = [\"zip\", \"diagnosis\"]\n",
    ));
    let report = run(&s);
    assert!(matches!(report.flows[0].status, FlowStatus::Withheld { .. }));
    assert!(run_with_log(&s).audit.releases_sent.is_empty());
    assert_clean(&report);
}

#[test]
fn unregistered_study_is_refused() {
    let s = with(concat!(
        "[[schedule]]\nkind = \"research\"\nresearcher = \"D2#R1\"\nstudy = \"other\"\n",
        "consent_fraction = 1.0\nshare = [\"zip\"]\n",
    ));
    let report = run(&s);
    assert_eq!(report.flows[0].status.label(), "aborted");
    assert_clean(&report);
}

#[test]
fn bypass_sends_raw_records_to_the_researcher() {
    let s = with(concat!(
        "[adversary]\ncoalition = [\"researcher:D2#R1\"]\n",
        "[[schedule]]\nkind = \"research\"\nresearcher = \"D2#R1\"\nstudy = \"diabetes-2026\"\n",
        "consent_fraction = 0.5\nshare = [\"ssn\", \"diagnosis\"]\nbypass_anonymizer = true\n",
    ));
    let report = run(&s);
    assert_eq!(report.flows[0].status, FlowStatus::Completed);
    assert_eq!(report.flows[0].detail["direct_submissions"], "3");
    assert_clean(&report);
}

#[test]
fn emergency_access_notifies_and_flags_strangers() {
    let s = with(concat!(
        "[[schedule]]\nkind = \"emergency_deposit\"\npatient = 2\n",
        "[[schedule]]\nkind = \"emergency_access\"\npatient = 2\naccessor = \"contact\"\n",
        "[[schedule]]\nkind = \"emergency_access\"\npatient = 2\naccessor = \"intruder\"\n",
        "[[schedule]]\nkind = \"emergency_access\"\npatient = 3\naccessor = \"intruder\"\n",
    ));
    let run = run_with_log(&s);
    let flows = &run.report.flows;
    assert_eq!(flows[0].status, FlowStatus::Completed);
    assert_eq!(flows[1].detail["opened"], "true");
    assert_eq!(flows[1].detail["flag_raised"], "false");
    assert_eq!(flows[2].detail["opened"], "false");
    assert_eq!(flows[2].detail["flag_raised"], "true");
    assert_eq!(flows[3].status.label(), "aborted");
    assert_eq!(run.audit.notices_received[&crate::sim::EntityId::patient(2)], 2);
    assert_clean(&run.report);
}

#[test]
fn no_contact_means_no_deposit() {
    let s = with(concat!(
        "[[schedule]]\nkind = \"emergency_deposit\"\npatient = 0\n",
    ))
    .tap_contacts(false);
    let report = run(&s);
    assert_eq!(report.flows[0].status.label(), "aborted");
    assert_clean(&report);
}

trait TapContacts {
    fn tap_contacts(self, on: bool) -> Self;
}

impl TapContacts for Scenario {
    fn tap_contacts(mut self, on: bool) -> Self {
        self.population.designate_emergency_contacts = on;
        self
    }
}

#[test]
fn baseline_links_every_patient_and_keys_link_none() {
    let flows = "[[schedule]]\nkind = \"lab_rounds\"\nrounds = 3\n";
    let coalition = "coalition = [\"lab:D1#L1\", \"lab:D1#L2\", \"lab:D2#L3\"]\n";
    let baseline = with(&format!("[adversary]\n{coalition}token_mode = \"baseline_ssn\"\n{flows}"));
    let report = run(&baseline);
    assert_eq!(report.linkage_rate(), Some(1.0));
    assert_clean(&report);

    let mut keys = with(&format!("[adversary]\n{coalition}{flows}"));
    keys.key_pool.public_threshold = 1;
    let report = run(&keys);
    assert_eq!(report.linkage_rate(), Some(0.0));
    assert_eq!(report.metrics.as_ref().unwrap().analytic_linkage_rate, Some(0.0));
    assert_clean(&report);
}

#[test]
fn reruns_are_identical() {
    let s = with(concat!(
        "[adversary]\ncoalition = [\"lab:D1#L1\", \"physician:0\"]\n",
        "[[schedule]]\nkind = \"lab_rounds\"\nrounds = 2\n",
        "[[schedule]]\nkind = \"emergency_deposit\"\npatient = 1\n",
    ));
    let a = run_with_log(&s);
    let b = run_with_log(&s);
    assert_eq!(a.report, b.report);
    assert_eq!(a.log.digest(), b.log.digest());
    let mut other = s.clone();
    other.seed += 1;
    assert_ne!(run(&other).log_digest, a.report.log_digest);
}

