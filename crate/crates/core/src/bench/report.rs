//! Versioned, self-verifying experiment reports.
//!
//! Aggregates are a pure function of the records, so [`Report::verify`] can
//! recompute them. All maps are ordered and all values are derived from
//! virtual time, which makes the serialized report a function of the seed.

use std::collections::BTreeMap;
use std::io::Write;

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::faas_sim::{default_catalog, WorkloadProfile};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub const CALIBRATION_NOTE: &str = "latencies are emulated on virtual time from calibrated workload profiles \
     and device contention models; they are not hardware measurements";

/// One measured invocation (or keep-alive) inside an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub group: String,
    pub id: String,
    /// `local`, `remote`, `rejected` or `keep_alive`.
    pub target: String,
    /// `cold` / `warm` for platform invocations.
    pub served: Option<String>,
    pub enqueued_at: u64,
    /// Hub-observed end-to-end latency.
    pub latency_ms: u64,
    pub encrypt_ms: u64,
    pub exec_ms: u64,
    /// Platform-side e2e for remote invocations.
    pub platform_ms: Option<u64>,
    pub cost_usd: Decimal,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub count: usize,
    pub mean: f64,
    pub stddev: f64,
    pub min: u64,
    pub p50: u64,
    pub p95: u64,
    pub p99: u64,
    pub max: u64,
}

impl Stats {
    /// Population statistics; percentiles are nearest-rank.
    pub fn of(values: &[u64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_unstable();
        let n = v.len();
        let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
        let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let rank = |p: f64| v[((p * n as f64).ceil() as usize).clamp(1, n) - 1];
        Some(Self {
            count: n,
            mean,
            stddev: var.sqrt(),
            min: v[0],
            p50: rank(0.50),
            p95: rank(0.95),
            p99: rank(0.99),
            max: v[n - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub records: usize,
    pub errors: usize,
    pub local: usize,
    pub remote: usize,
    pub keep_alive: usize,
    pub cold: usize,
    pub warm: usize,
    /// Over successful non-keep-alive records.
    pub latency: Option<Stats>,
    pub exec: Option<Stats>,
    pub platform: Option<Stats>,
    pub cost_usd: Decimal,
}

impl Aggregate {
    pub fn of<'a>(records: impl IntoIterator<Item = &'a Record>) -> Self {
        let mut a = Aggregate {
            records: 0,
            errors: 0,
            local: 0,
            remote: 0,
            keep_alive: 0,
            cold: 0,
            warm: 0,
            latency: None,
            exec: None,
            platform: None,
            cost_usd: Decimal::ZERO,
        };
        let (mut lat, mut exec, mut plat) = (Vec::new(), Vec::new(), Vec::new());
        for r in records {
            a.records += 1;
            a.cost_usd += r.cost_usd;
            match r.served.as_deref() {
                Some("cold") => a.cold += 1,
                Some("warm") => a.warm += 1,
                _ => {}
            }
            match r.target.as_str() {
                "local" => a.local += 1,
                "remote" => a.remote += 1,
                "keep_alive" => {
                    a.keep_alive += 1;
                    continue;
                }
                _ => {}
            }
            if r.error.is_some() {
                a.errors += 1;
                continue;
            }
            lat.push(r.latency_ms);
            exec.push(r.exec_ms);
            if let Some(p) = r.platform_ms {
                plat.push(p);
            }
        }
        a.latency = Stats::of(&lat);
        a.exec = Stats::of(&exec);
        a.platform = Stats::of(&plat);
        a
    }

    pub fn mean_latency(&self) -> f64 {
        self.latency.as_ref().map_or(f64::NAN, |s| s.mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub experiment: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub calibration: Calibration,
    pub records: Vec<Record>,
    pub aggregates: BTreeMap<String, Aggregate>,
    /// Sum of all record costs.
    pub total_cost_usd: Decimal,
    /// Emulator ledger total for the same run (cross-check).
    pub ledger_total_usd: Decimal,
    /// Experiment-specific derived values.
    pub summary: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub note: String,
    pub profiles: BTreeMap<String, WorkloadProfile>,
}

impl Default for Calibration {
    fn default() -> Self {
        Self {
            note: CALIBRATION_NOTE.into(),
            profiles: default_catalog(),
        }
    }
}

impl Report {
    pub fn new(experiment: &str, seed: u64, config: &impl Serialize) -> Result<Self, BenchError> {
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            experiment: experiment.into(),
            seed,
            config: serde_json::to_value(config)?,
            calibration: Calibration::default(),
            records: Vec::new(),
            aggregates: BTreeMap::new(),
            total_cost_usd: Decimal::ZERO,
            ledger_total_usd: Decimal::ZERO,
            summary: BTreeMap::new(),
        })
    }

    pub fn put(&mut self, key: &str, value: impl Serialize) -> Result<(), BenchError> {
        self.summary.insert(key.into(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn aggregate(&self, group: &str) -> Option<&Aggregate> {
        self.aggregates.get(group)
    }

    pub fn recompute(&self) -> (BTreeMap<String, Aggregate>, Decimal) {
        let mut groups: BTreeMap<&str, Vec<&Record>> = BTreeMap::new();
        for r in &self.records {
            groups.entry(&r.group).or_default().push(r);
        }
        let aggs = groups
            .into_iter()
            .map(|(g, rs)| (g.to_string(), Aggregate::of(rs)))
            .collect();
        let total = self.records.iter().map(|r| r.cost_usd).sum();
        (aggs, total)
    }

    /// Fills aggregates and totals from the records.
    pub fn finalize(&mut self, ledger_total: Decimal) {
        let (aggs, total) = self.recompute();
        self.aggregates = aggs;
        self.total_cost_usd = total;
        self.ledger_total_usd = ledger_total;
    }

    /// Checks that the aggregates and totals match the records and that the
    /// cost total matches the emulator ledger.
    pub fn verify(&self) -> Result<(), BenchError> {
        let (aggs, total) = self.recompute();
        if aggs != self.aggregates {
            return Err(BenchError::Verify("aggregates differ from records".into()));
        }
        if total != self.total_cost_usd {
            return Err(BenchError::Verify(format!(
                "record costs sum to {total}, report says {}",
                self.total_cost_usd
            )));
        }
        if total != self.ledger_total_usd {
            return Err(BenchError::Verify(format!(
                "record costs {total} differ from emulator ledger {}",
                self.ledger_total_usd
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, BenchError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, BenchError> {
        Ok(serde_json::from_str(s)?)
    }

    /// Per-record CSV with a header row.
    pub fn write_csv(&self, w: impl Write) -> Result<(), BenchError> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.records {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }
}
