//! Re-running one scenario across values of a single parameter.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::report::SweepRow;

use super::{run, Scenario, ScenarioError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    PrivateKeys,
    SubkeysPerPrivate,
    PublicThreshold,
    PrivateThreshold,
    K,
    L,
    MinPoolSize,
    Patients,
    Seed,
}

impl SweepParam {
    const NAMES: [(&'static str, SweepParam); 9] = [
        ("private_keys", SweepParam::PrivateKeys),
        ("subkeys_per_private", SweepParam::SubkeysPerPrivate),
        ("public_threshold", SweepParam::PublicThreshold),
        ("private_threshold", SweepParam::PrivateThreshold),
        ("k", SweepParam::K),
        ("l", SweepParam::L),
        ("min_pool_size", SweepParam::MinPoolSize),
        ("patients", SweepParam::Patients),
        ("seed", SweepParam::Seed),
    ];

    pub fn name(self) -> &'static str {
        Self::NAMES
            .iter()
            .find(|(_, p)| *p == self)
            .map(|(n, _)| *n)
            .expect("every param is named")
    }

    /// Sets this parameter on `scenario` and revalidates.
    pub fn apply(self, scenario: &mut Scenario, value: &str) -> Result<(), ScenarioError> {
        let bad = |e: String| ScenarioError {
            field: self.name().to_string(),
            line: None,
            message: format!("`{value}`: {e}"),
        };
        let int = || value.parse::<u64>().map_err(|e| bad(e.to_string()));
        let small = || u32::try_from(int()?).map_err(|e| bad(e.to_string()));
        let pool = &mut scenario.key_pool;
        match self {
            SweepParam::PrivateKeys => pool.private_keys = small()?,
            SweepParam::SubkeysPerPrivate => pool.subkeys_per_private = small()?,
            SweepParam::PublicThreshold => pool.public_threshold = small()?,
            SweepParam::PrivateThreshold => pool.private_threshold = small()?,
            SweepParam::K => scenario.anonymizer.k = int()? as usize,
            SweepParam::L => scenario.anonymizer.l = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            SweepParam::MinPoolSize => scenario.anonymizer.min_pool_size = int()? as usize,
            SweepParam::Patients => scenario.population.patients = int()? as usize,
            SweepParam::Seed => scenario.seed = int()?,
        }
        scenario.validate()
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.rsplit('.').next().unwrap_or(s);
        Self::NAMES
            .iter()
            .find(|(n, _)| *n == s)
            .map(|(_, p)| *p)
            .ok_or_else(|| {
                let known: Vec<&str> = Self::NAMES.iter().map(|(n, _)| *n).collect();
                format!("unknown sweep parameter `{s}` (known: {})", known.join(", "))
            })
    }
}

/// `param=a..b` (inclusive integers) or `param=a,b,c`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<String>,
}

impl FromStr for SweepSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (param, values) = s
            .split_once('=')
            .ok_or_else(|| format!("`{s}` is not of the form param=a..b or param=a,b,c"))?;
        let param: SweepParam = param.trim().parse()?;
        let values: Vec<String> = match values.split_once("..") {
            Some((a, b)) => {
                let parse = |v: &str| v.trim().parse::<u64>().map_err(|e| format!("`{v}`: {e}"));
                let (a, b) = (parse(a)?, parse(b)?);
                if a > b {
                    return Err(format!("empty range {a}..{b}"));
                }
                (a..=b).map(|v| v.to_string()).collect()
            }
            None => values.split(',').map(|v| v.trim().to_string()).collect(),
        };
        if values.iter().any(String::is_empty) {
            return Err(format!("`{s}` has an empty value"));
        }
        Ok(Self { param, values })
    }
}

/// For each value, `runs` runs seeded `seed, seed + 1, ...`, in parallel.
/// Rows are in value order and independent of thread scheduling.
pub fn run_sweep(base: &Scenario, sweep: &SweepSpec, runs: usize) -> Result<Vec<SweepRow>, ScenarioError> {
    sweep.values
        .iter()
        .map(|value| {
            let mut scenario = base.clone();
            sweep.param.apply(&mut scenario, value)?;
            let reports: Vec<_> = (0..runs as u64)
                .into_par_iter()
                .map(|r| {
                    let mut s = scenario.clone();
                    s.seed = scenario.seed.wrapping_add(r);
                    run(&s)
                })
                .collect();
            let rates: Vec<f64> = reports.iter().filter_map(|r| r.linkage_rate()).collect();
            let mean = (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64);
            let analytic = reports
                .first()
                .and_then(|r| r.metrics.as_ref())
                .and_then(|m| m.analytic_linkage_rate);
            Ok(SweepRow {
                value: value.clone(),
                runs,
                mean_linkage_rate: mean,
                analytic_linkage_rate: analytic,
                violations: reports.iter().filter(|r| !r.passed()).count(),
            })
        })
        .collect()
}
