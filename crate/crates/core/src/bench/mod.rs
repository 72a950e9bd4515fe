//! Experiment harness over virtual time.
//!
//! Each experiment builds fresh in-process deployments ([`World`]), drives
//! the hub with a seeded trace and returns a [`Report`].

pub mod experiments;
pub mod report;
pub mod trace;
pub mod world;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub use experiments::{
    run_coldwarm, run_cost_report, run_doorbell, run_latency_matrix, run_offload, run_scalability, ColdWarmConfig,
    CostConfig, DoorbellConfig, LatencyConfig, OffloadConfig, ScalabilityConfig,
};
pub use report::{Aggregate, Record, Report, Stats, REPORT_SCHEMA_VERSION};
pub use trace::{Arrival, TraceItem, TraceSpec};
pub use world::{AppSpec, World};

use crate::faas_sim::FaasError;
use crate::hub::HubError;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config: {0}")]
    Config(String),
    #[error("report verification failed: {0}")]
    Verify(String),
    #[error(transparent)]
    Hub(#[from] HubError),
    #[error(transparent)]
    Faas(#[from] FaasError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Experiment {
    ColdWarm,
    Latency,
    Scalability,
    Offload,
    Cost,
    Doorbell,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::ColdWarm,
        Experiment::Latency,
        Experiment::Scalability,
        Experiment::Offload,
        Experiment::Cost,
        Experiment::Doorbell,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::ColdWarm => "coldwarm",
            Experiment::Latency => "latency",
            Experiment::Scalability => "scalability",
            Experiment::Offload => "offload",
            Experiment::Cost => "cost",
            Experiment::Doorbell => "doorbell",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| BenchError::Config(format!("unknown experiment {s:?}")))
    }
}

fn parse<T: serde::de::DeserializeOwned + Default>(config: Option<serde_json::Value>) -> Result<T, BenchError> {
    match config {
        None => Ok(T::default()),
        Some(v) => serde_json::from_value(v).map_err(|e| BenchError::Config(e.to_string())),
    }
}

/// Runs `exp` with a JSON config; missing keys take their defaults.
pub fn run(exp: Experiment, config: Option<serde_json::Value>) -> Result<Report, BenchError> {
    let report = match exp {
        Experiment::ColdWarm => run_coldwarm(&parse(config)?)?,
        Experiment::Latency => run_latency_matrix(&parse(config)?)?,
        Experiment::Scalability => run_scalability(&parse(config)?)?,
        Experiment::Offload => run_offload(&parse(config)?)?,
        Experiment::Cost => run_cost_report(&parse(config)?)?,
        Experiment::Doorbell => run_doorbell(&parse(config)?)?,
    };
    report.verify()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn small(exp: Experiment) -> serde_json::Value {
        match exp {
            Experiment::ColdWarm => json!({"profiles": ["DenseNet"], "invocations": 3}),
            Experiment::Latency => json!({"profiles": ["MobileNet", "Darknet"], "invocations": 3}),
            Experiment::Scalability => json!({"max_concurrency": 5}),
            Experiment::Offload => json!({"max_local": [4], "trace": {"duration_ms": 300000}}),
            Experiment::Cost => json!({}),
            Experiment::Doorbell => json!({"days": 2}),
        }
    }

    #[test]
    fn every_experiment_runs_and_verifies() {
        for exp in Experiment::ALL {
            let r = run(exp, Some(small(exp))).unwrap_or_else(|e| panic!("{exp}: {e}"));
            assert_eq!(r.experiment, exp.name());
            assert_eq!(r.schema_version, REPORT_SCHEMA_VERSION);
            assert!(!r.summary.is_empty(), "{exp}");
        }
    }

    #[test]
    fn same_seed_gives_identical_reports() {
        for exp in [Experiment::Offload, Experiment::Doorbell] {
            let a = run(exp, Some(small(exp))).unwrap().to_json().unwrap();
            let b = run(exp, Some(small(exp))).unwrap().to_json().unwrap();
            assert_eq!(a, b, "{exp}");
        }
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(run(Experiment::ColdWarm, Some(json!({"invocations": "many"}))).is_err());
        assert!(run(Experiment::Cost, Some(json!({"sed": 1}))).is_err());
        assert!(run(Experiment::Offload, Some(json!({"trace": {"duration": 5}}))).is_err());
        assert!("nope".parse::<Experiment>().is_err());
        assert_eq!("coldwarm".parse::<Experiment>().unwrap(), Experiment::ColdWarm);
    }

    #[test]
    fn coldwarm_small_run_matches_profile() {
        let r = run(Experiment::ColdWarm, Some(small(Experiment::ColdWarm))).unwrap();
        let cold = r.aggregate("DenseNet/cold").unwrap();
        let warm = r.aggregate("DenseNet/warm").unwrap();
        assert_eq!((cold.cold, warm.warm), (3, 3));
        let ratio = cold.platform.as_ref().unwrap().mean / warm.platform.as_ref().unwrap().mean;
        assert!((10.0..11.5).contains(&ratio), "{ratio}");
    }
}
