//! Run reports and their two output formats.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::AdversaryMetrics;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FlowStatus {
    Completed,
    Aborted { reason: String },
    /// The anonymizer held the batch back.
    Withheld { reason: String },
    /// The flow went quiet without reaching an outcome.
    Incomplete,
}

impl FlowStatus {
    pub fn label(&self) -> &'static str {
        match self {
            FlowStatus::Completed => "completed",
            FlowStatus::Aborted { .. } => "aborted",
            FlowStatus::Withheld { .. } => "withheld",
            FlowStatus::Incomplete => "incomplete",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowOutcome {
    pub index: usize,
    pub kind: String,
    pub label: String,
    #[serde(flatten)]
    pub status: FlowStatus,
    pub detail: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvariantCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub flows: Vec<FlowOutcome>,
    pub metrics: Option<AdversaryMetrics>,
    pub invariants: Vec<InvariantCheck>,
    pub event_count: usize,
    pub log_digest: String,
}

impl RunReport {
    pub fn empty(seed: u64) -> Self {
        Self {
            seed,
            flows: Vec::new(),
            metrics: None,
            invariants: Vec::new(),
            event_count: 0,
            log_digest: crate::crypto::digest_hex(b""),
        }
    }

    pub fn passed(&self) -> bool {
        self.invariants.iter().all(|c| c.passed)
    }

    pub fn violations(&self) -> impl Iterator<Item = &InvariantCheck> {
        self.invariants.iter().filter(|c| !c.passed)
    }

    pub fn count(&self, label: &str) -> usize {
        self.flows.iter().filter(|f| f.status.label() == label).count()
    }

    pub fn linkage_rate(&self) -> Option<f64> {
        self.metrics.as_ref().map(|m| m.linkage_rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmitFormat {
    Summary,
    Records,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Header {
        seed: u64,
        event_count: usize,
        log_digest: String,
    },
    Flow(FlowOutcome),
    Metrics(AdversaryMetrics),
    Invariant(InvariantCheck),
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("line {line}: {source}")]
    Malformed { line: usize, source: serde_json::Error },
    #[error("first record must be the header")]
    MissingHeader,
    #[error("line {0}: second header")]
    DuplicateHeader(usize),
}

pub fn emit(report: &RunReport, format: EmitFormat) -> String {
    match format {
        EmitFormat::Summary => summary(report),
        EmitFormat::Records => records(report),
    }
}

fn records(report: &RunReport) -> String {
    let mut lines = vec![Record::Header {
        seed: report.seed,
        event_count: report.event_count,
        log_digest: report.log_digest.clone(),
    }];
    lines.extend(report.flows.iter().cloned().map(Record::Flow));
    lines.extend(report.metrics.iter().cloned().map(Record::Metrics));
    lines.extend(report.invariants.iter().cloned().map(Record::Invariant));
    let mut out = String::new();
    for r in lines {
        out.push_str(&serde_json::to_string(&r).expect("records serialize"));
        out.push('\n');
    }
    out
}

/// Reads back what the records format wrote.
pub fn parse_records(text: &str) -> Result<RunReport, ReportError> {
    let mut report: Option<RunReport> = None;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let record: Record =
            serde_json::from_str(line).map_err(|source| ReportError::Malformed { line: i + 1, source })?;
        match (record, report.as_mut()) {
            (
                Record::Header {
                    seed,
                    event_count,
                    log_digest,
                },
                None,
            ) => {
                report = Some(RunReport {
                    seed,
                    flows: Vec::new(),
                    metrics: None,
                    invariants: Vec::new(),
                    event_count,
                    log_digest,
                })
            }
            (Record::Header { .. }, Some(_)) => return Err(ReportError::DuplicateHeader(i + 1)),
            (_, None) => return Err(ReportError::MissingHeader),
            (Record::Flow(f), Some(r)) => r.flows.push(f),
            (Record::Metrics(m), Some(r)) => r.metrics = Some(m),
            (Record::Invariant(c), Some(r)) => r.invariants.push(c),
        }
    }
    report.ok_or(ReportError::MissingHeader)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"))
}

fn summary(report: &RunReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "seed {} | {} events | log digest {}",
        report.seed, report.event_count, report.log_digest
    );
    let _ = writeln!(
        out,
        "flows: {} total, {} completed, {} aborted, {} withheld, {} incomplete",
        report.flows.len(),
        report.count("completed"),
        report.count("aborted"),
        report.count("withheld"),
        report.count("incomplete"),
    );
    for f in &report.flows {
        let why = match &f.status {
            FlowStatus::Aborted { reason } | FlowStatus::Withheld { reason } => format!(" ({reason})"),
            _ => String::new(),
        };
        let _ = writeln!(out, "  #{:<4} {:<16} {}: {}{why}", f.index, f.kind, f.label, f.status.label());
    }
    if let Some(m) = &report.metrics {
        let coalition: Vec<&str> = m.coalition.iter().map(|e| e.as_str()).collect();
        let _ = writeln!(out, "adversary: coalition {}", coalition.join(", "));
        let _ = writeln!(
            out,
            "  linkage rate {:.3} ({}/{} patients), enrichment {:.2}, precision {}",
            m.linkage_rate,
            m.linked_patients,
            m.patients,
            m.enrichment,
            fmt_opt(m.precision)
        );
        let _ = writeln!(out, "  {} shards joined into {} profiles", m.shards, m.profiles);
        if let Some(a) = m.analytic_linkage_rate {
            let _ = writeln!(out, "  analytic linkage estimate {a:.3}");
        }
        if let Some(r) = m.reidentified {
            let _ = writeln!(out, "  profiles re-identified through releases: {r}");
        }
    }
    let passed = report.invariants.iter().filter(|c| c.passed).count();
    let _ = writeln!(out, "invariants: {passed}/{} passed", report.invariants.len());
    for c in &report.invariants {
        let mark = if c.passed { "ok" } else { "FAIL" };
        let _ = writeln!(out, "  [{mark}] {}: {}", c.name, c.detail);
    }
    out
}

/// One row of a parameter sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub runs: usize,
    pub mean_linkage_rate: Option<f64>,
    pub analytic_linkage_rate: Option<f64>,
    pub violations: usize,
}

pub fn sweep_table(param: &str, rows: &[SweepRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{param:>16} {:>6} {:>10} {:>10} {:>10}", "runs", "linkage", "analytic", "violations");
    for r in rows {
        let _ = writeln!(
            out,
            "{:>16} {:>6} {:>10} {:>10} {:>10}",
            r.value,
            r.runs,
            fmt_opt(r.mean_linkage_rate),
            fmt_opt(r.analytic_linkage_rate),
            r.violations
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::EntityId;

    fn sample() -> RunReport {
        RunReport {
            seed: 3,
            flows: vec![
                FlowOutcome {
                    index: 0,
                    kind: "lab_flow".into(),
                    label: "patient:0 -> D1#L1".into(),
                    status: FlowStatus::Completed,
                    detail: [("lab_digest".to_string(), "ab".to_string())].into(),
                },
                FlowOutcome {
                    index: 1,
                    kind: "lab_flow".into(),
                    label: "patient:1 -> D1#L1".into(),
                    status: FlowStatus::Aborted {
                        reason: "blob_mismatch".into(),
                    },
                    detail: BTreeMap::new(),
                },
            ],
            metrics: Some(AdversaryMetrics {
                coalition: vec![EntityId::new("lab:D1#L1")],
                shards: 2,
                profiles: 2,
                patients: 2,
                linked_patients: 0,
                linkage_rate: 0.0,
                enrichment: 1.0,
                precision: None,
                reidentified: None,
                analytic_linkage_rate: Some(0.1 + 0.2),
            }),
            invariants: vec![InvariantCheck {
                name: "confidentiality".into(),
                passed: true,
                detail: "2 results".into(),
            }],
            event_count: 40,
            log_digest: "ff".into(),
        }
    }

    #[test]
    fn records_round_trip() {
        let report = sample();
        let text = emit(&report, EmitFormat::Records);
        assert_eq!(parse_records(&text).unwrap(), report);
    }

    #[test]
    fn empty_report_is_header_only() {
        let text = emit(&RunReport::empty(9), EmitFormat::Records);
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with(r#"{"record":"header","seed":9"#));
        assert_eq!(parse_records(&text).unwrap(), RunReport::empty(9));
    }

    #[test]
    fn summary_counts_flows() {
        let text = emit(&sample(), EmitFormat::Summary);
        assert!(text.contains("flows: 2 total, 1 completed, 1 aborted"));
        assert!(text.contains("invariants: 1/1 passed"));
    }

    #[test]
    fn records_need_a_header_first() {
        assert!(matches!(parse_records(""), Err(ReportError::MissingHeader)));
        let flow = r#"{"record":"invariant","name":"x","passed":true,"detail":""}"#;
        assert!(matches!(parse_records(flow), Err(ReportError::MissingHeader)));
    }
}
