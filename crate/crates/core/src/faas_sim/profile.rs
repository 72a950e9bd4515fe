//! Workload profiles: timing and billing model of an app on the FaaS
//! platform and on local hub devices.

use std::collections::BTreeMap;

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use super::FaasError;
use crate::clock::Millis;
use crate::hub::DeviceClass;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ServedState {
    Cold,
    Warm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadProfile {
    pub name: String,
    /// App execution on a warm instance, excluding KMS and network.
    pub warm_exec_ms: Millis,
    /// Added before execution when a new instance is created.
    pub cold_init_ms: Millis,
    pub billed_warm_gbs: Decimal,
    pub billed_cold_gbs: Decimal,
    /// Memory the billed GB-seconds were measured at.
    pub memory_gb: Decimal,
    /// Single-instance execution time per local device; absent means the
    /// device cannot run this profile.
    #[serde(default)]
    pub local_exec_ms: BTreeMap<DeviceClass, Millis>,
    pub local_mem_gb: f64,
}

impl WorkloadProfile {
    pub fn validate(&self) -> Result<(), FaasError> {
        let bad = |why: &str| {
            Err(FaasError::InvalidProfile {
                name: self.name.clone(),
                reason: why.to_string(),
            })
        };
        if self.name.is_empty() {
            return bad("empty name");
        }
        if self.warm_exec_ms == 0 {
            return bad("warm_exec_ms must be > 0");
        }
        if self.billed_warm_gbs <= Decimal::ZERO || self.memory_gb <= Decimal::ZERO {
            return bad("billed durations and memory must be > 0");
        }
        if self.billed_cold_gbs < self.billed_warm_gbs {
            return bad("billed_cold_gbs < billed_warm_gbs");
        }
        if self.local_exec_ms.values().any(|&ms| ms == 0) {
            return bad("local_exec_ms entries must be > 0");
        }
        if self.local_mem_gb.is_nan() || self.local_mem_gb <= 0.0 {
            return bad("local_mem_gb must be > 0");
        }
        Ok(())
    }

    pub fn billed_gbs(&self, state: ServedState) -> Decimal {
        match state {
            ServedState::Cold => self.billed_cold_gbs,
            ServedState::Warm => self.billed_warm_gbs,
        }
    }

    /// Billed GB-seconds when deployed with `memory_gb` instead of the
    /// profile's reference memory.
    pub fn billed_gbs_at(&self, state: ServedState, memory_gb: Decimal) -> Decimal {
        self.billed_gbs(state) * memory_gb / self.memory_gb
    }

    /// Remote end-to-end latency without jitter.
    pub fn remote_e2e_ms(&self, state: ServedState, network_ms: Millis, kms_ms: Millis) -> Millis {
        let init = if state == ServedState::Cold { self.cold_init_ms } else { 0 };
        network_ms + init + kms_ms + self.warm_exec_ms
    }

    pub fn local_exec(&self, device: &DeviceClass) -> Option<Millis> {
        self.local_exec_ms.get(device).copied()
    }
}

fn gbs(s: &str) -> Decimal {
    s.parse().expect("static decimal literal")
}

fn profile(
    name: &str,
    warm_exec_ms: Millis,
    cold_init_ms: Millis,
    billed: (&str, &str),
    local: &[(DeviceClass, Millis)],
    local_mem_gb: f64,
) -> WorkloadProfile {
    WorkloadProfile {
        name: name.to_string(),
        warm_exec_ms,
        cold_init_ms,
        billed_warm_gbs: gbs(billed.0),
        billed_cold_gbs: gbs(billed.1),
        memory_gb: Decimal::from(3),
        local_exec_ms: local.iter().cloned().collect(),
        local_mem_gb,
    }
}

/// Default calibration.
///
/// Billed GB-s are the published requests-per-dollar figures inverted through
/// the pricing formula at 3 GB and rounded to the 100 ms billing unit (0.3 GB-s).
/// Remote e2e = 190 ms network + cold init (cold only) + 206 ms KMS + warm exec.
/// DenseNet and Darknet timings reproduce the measured cold/warm latencies;
/// MobileNet and SSDMobilenet timings are chosen so that KMS + exec (+ init)
/// equals their billed duration.
pub fn default_catalog() -> BTreeMap<String, WorkloadProfile> {
    use DeviceClass::{JetsonNano, RPi};
    [
        profile("MobileNet", 94, 1100, ("0.9", "4.2"), &[(RPi, 420), (JetsonNano, 99)], 0.25),
        profile("DenseNet", 455, 8302, ("2.7", "8.4"), &[(RPi, 4300), (JetsonNano, 587)], 1.0),
        profile("Darknet", 6696, 28867, ("20.7", "32.4"), &[(JetsonNano, 1347)], 2.0),
        profile("SSDMobilenet", 2594, 2000, ("8.4", "14.4"), &[(JetsonNano, 1100)], 1.0),
    ]
    .into_iter()
    .map(|p| (p.name.clone(), p))
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        for p in default_catalog().values() {
            p.validate().unwrap();
        }
    }

    #[test]
    fn densenet_and_darknet_compose_to_measured_latency() {
        let cat = default_catalog();
        let d = &cat["DenseNet"];
        assert_eq!(d.remote_e2e_ms(ServedState::Warm, 190, 206), 851);
        assert_eq!(d.remote_e2e_ms(ServedState::Cold, 190, 206), 9153);
        let k = &cat["Darknet"];
        assert_eq!(k.remote_e2e_ms(ServedState::Warm, 190, 206), 7092);
        assert_eq!(k.remote_e2e_ms(ServedState::Cold, 190, 206), 35959);
    }

    #[test]
    fn detection_profiles_have_no_rpi_timing() {
        let cat = default_catalog();
        assert!(cat["Darknet"].local_exec(&DeviceClass::RPi).is_none());
        assert!(cat["SSDMobilenet"].local_exec(&DeviceClass::RPi).is_none());
        assert_eq!(cat["DenseNet"].local_exec(&DeviceClass::RPi), Some(4300));
    }

    #[test]
    fn validation_rejects_inverted_billing() {
        let mut p = default_catalog()["DenseNet"].clone();
        p.billed_cold_gbs = Decimal::ONE;
        assert!(p.validate().is_err());
    }

    #[test]
    fn billing_scales_with_memory() {
        let p = &default_catalog()["DenseNet"];
        assert_eq!(p.billed_gbs_at(ServedState::Warm, gbs("1.5")), gbs("1.35"));
    }
}
