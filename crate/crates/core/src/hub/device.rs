//! Local hub hardware classes and their calibrated defaults.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum DeviceClass {
    RPi,
    JetsonNano,
    Custom(String),
}

impl fmt::Display for DeviceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeviceClass::RPi => f.write_str("rpi"),
            DeviceClass::JetsonNano => f.write_str("jetson"),
            DeviceClass::Custom(name) => f.write_str(name),
        }
    }
}

impl FromStr for DeviceClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "" => Err("empty device class".into()),
            "rpi" | "raspberrypi" | "raspberry-pi" => Ok(DeviceClass::RPi),
            "jetson" | "jetsonnano" | "jetson-nano" => Ok(DeviceClass::JetsonNano),
            _ => Ok(DeviceClass::Custom(s.to_string())),
        }
    }
}

impl From<DeviceClass> for String {
    fn from(d: DeviceClass) -> String {
        d.to_string()
    }
}

impl TryFrom<String> for DeviceClass {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// Cost model for hub-side cryptography (seal + wrap before egress).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CryptoCost {
    pub fixed_ms: f64,
    pub per_mib_ms: f64,
    /// Slowdown per additional concurrent encryption.
    pub contention: f64,
    /// Opening a sealed result.
    pub result_open_ms: f64,
}

impl CryptoCost {
    pub fn encrypt_ms(&self, payload_bytes: usize, concurrent: usize) -> f64 {
        let base = self.fixed_ms + self.per_mib_ms * payload_bytes as f64 / (1024.0 * 1024.0);
        base * (1.0 + self.contention * concurrent.saturating_sub(1) as f64)
    }
}

/// Capacity and performance model of a local hub device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub class: DeviceClass,
    pub total_slots: usize,
    pub total_mem_gb: f64,
    /// Per-instance slowdown: `exec × (1 + c·(k−1))` with k concurrent instances.
    pub contention: f64,
    pub crypto: CryptoCost,
    /// Power draw used for the electricity baseline.
    pub watts: f64,
}

impl DeviceSpec {
    /// Calibrated defaults. Jetson contention puts four concurrent instances
    /// at 4.7× the single-instance latency; the memory budgets reproduce the
    /// 4-instance (1 GB models) and 2-instance (2 GB models) ceilings.
    pub fn defaults(class: DeviceClass) -> Self {
        match class {
            DeviceClass::RPi => Self {
                class,
                total_slots: 4,
                total_mem_gb: 1.0,
                contention: 1.0,
                crypto: CryptoCost {
                    fixed_ms: 60.0,
                    per_mib_ms: 400.0,
                    contention: 0.15,
                    result_open_ms: 2.0,
                },
                watts: 10.0,
            },
            DeviceClass::JetsonNano => Self {
                class,
                total_slots: 4,
                total_mem_gb: 4.0,
                contention: 3.7 / 3.0,
                crypto: CryptoCost {
                    fixed_ms: 20.0,
                    per_mib_ms: 60.0,
                    contention: 0.1,
                    result_open_ms: 1.0,
                },
                watts: 10.0,
            },
            DeviceClass::Custom(_) => Self {
                class,
                total_slots: 4,
                total_mem_gb: 8.0,
                contention: 1.0,
                crypto: CryptoCost {
                    fixed_ms: 10.0,
                    per_mib_ms: 30.0,
                    contention: 0.05,
                    result_open_ms: 1.0,
                },
                watts: 100.0,
            },
        }
    }

    pub fn contention_factor(&self, k: usize) -> f64 {
        1.0 + self.contention * k.saturating_sub(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display_roundtrip() {
        for s in ["rpi", "jetson", "desktop"] {
            assert_eq!(s.parse::<DeviceClass>().unwrap().to_string(), s);
        }
        assert!("".parse::<DeviceClass>().is_err());
        let json = serde_json::to_string(&DeviceClass::JetsonNano).unwrap();
        assert_eq!(json, "\"jetson\"");
    }

    #[test]
    fn jetson_four_way_contention_is_4_7x() {
        let d = DeviceSpec::defaults(DeviceClass::JetsonNano);
        assert!((d.contention_factor(4) - 4.7).abs() < 1e-12);
        assert_eq!(d.contention_factor(1), 1.0);
    }
}
