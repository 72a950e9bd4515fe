//! Seeded request traces.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::clock::{Millis, MINUTE_MS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arrival {
    FixedInterval { interval_ms: Millis },
    Burst { burst_size: usize, inter_burst_ms: Millis },
    Scripted { times: Vec<Millis> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceSpec {
    pub arrival: Arrival,
    /// TraceItem at or after this time are not generated (ignored for scripted).
    pub duration_ms: Millis,
    /// Profile name → relative weight.
    pub mix: BTreeMap<String, f64>,
    pub seed: u64,
}

impl Default for TraceSpec {
    /// Bursts of 8 every 60 s for 30 min, DenseNet-dominant.
    fn default() -> Self {
        Self {
            arrival: Arrival::Burst {
                burst_size: 8,
                inter_burst_ms: MINUTE_MS,
            },
            duration_ms: 30 * MINUTE_MS,
            mix: [("DenseNet".to_string(), 0.8), ("MobileNet".to_string(), 0.2)].into(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceItem {
    pub at: Millis,
    pub profile: String,
}

impl TraceSpec {
    pub fn generate(&self) -> Result<Vec<TraceItem>, BenchError> {
        let times: Vec<Millis> = match &self.arrival {
            Arrival::FixedInterval { interval_ms } => {
                if *interval_ms == 0 {
                    return Err(BenchError::Config("interval_ms must be > 0".into()));
                }
                (0..self.duration_ms).step_by(*interval_ms as usize).collect()
            }
            Arrival::Burst {
                burst_size,
                inter_burst_ms,
            } => {
                if *inter_burst_ms == 0 {
                    return Err(BenchError::Config("inter_burst_ms must be > 0".into()));
                }
                (0..self.duration_ms)
                    .step_by(*inter_burst_ms as usize)
                    .flat_map(|t| std::iter::repeat_n(t, *burst_size))
                    .collect()
            }
            Arrival::Scripted { times } => {
                let mut t = times.clone();
                t.sort_unstable();
                t
            }
        };
        let names: Vec<&String> = self.mix.keys().collect();
        let weights: Vec<f64> = self.mix.values().copied().collect();
        let dist = WeightedIndex::new(&weights).map_err(|e| BenchError::Config(format!("trace mix: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok(times
            .into_iter()
            .map(|at| TraceItem {
                at,
                profile: names[dist.sample(&mut rng)].clone(),
            })
            .collect())
    }
}

/// `n` sorted uniform offsets in `[0, span)`.
pub fn uniform_times(rng: &mut ChaCha8Rng, n: usize, span: Millis) -> Vec<Millis> {
    let mut v: Vec<Millis> = (0..n).map(|_| rng.gen_range(0..span)).collect();
    v.sort_unstable();
    v
}
