//! Per-invocation pricing and the cost ledger.

use rust_decimal::prelude::ToPrimitive;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use super::profile::{ServedState, WorkloadProfile};
use super::FaasError;

/// USD per invocation.
pub fn request_rate_usd() -> Decimal {
    Decimal::new(2, 7)
}

/// USD per GB-second.
pub fn gbs_rate_usd() -> Decimal {
    Decimal::new(166667, 10)
}

/// Smallest billed duration in milliseconds.
pub const BILLING_UNIT_MS: u64 = 100;

pub fn invocation_cost(billed_gbs: Decimal) -> Result<Decimal, FaasError> {
    if billed_gbs.is_sign_negative() && !billed_gbs.is_zero() {
        return Err(FaasError::NegativeBilling(billed_gbs));
    }
    Ok(request_rate_usd() + gbs_rate_usd() * billed_gbs)
}

/// `floor(1 / invocation_cost(billed))`.
pub fn requests_per_dollar_for(billed_gbs: Decimal) -> Result<u64, FaasError> {
    let cost = invocation_cost(billed_gbs)?;
    Ok((Decimal::ONE / cost).floor().to_u64().unwrap_or(u64::MAX))
}

pub fn requests_per_dollar(profile: &WorkloadProfile, state: ServedState) -> u64 {
    requests_per_dollar_for(profile.billed_gbs(state)).expect("validated profiles bill non-negative durations")
}

/// GB-seconds for a duration rounded up to the billing unit.
pub fn billed_gbs_for_duration(duration_ms: u64, memory_gb: Decimal) -> Decimal {
    let units = duration_ms.div_ceil(BILLING_UNIT_MS).max(1);
    Decimal::from(units * BILLING_UNIT_MS) / Decimal::from(1000) * memory_gb
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub invocation_id: u64,
    pub billed_gbs: Decimal,
    pub cost_usd: Decimal,
}

/// Append-only cost ledger; `total` is the running exact sum.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CostMeter {
    ledger: Vec<LedgerEntry>,
    total: Decimal,
}

impl CostMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn charge(&mut self, invocation_id: u64, billed_gbs: Decimal) -> Result<Decimal, FaasError> {
        let cost_usd = invocation_cost(billed_gbs)?;
        self.total += cost_usd;
        self.ledger.push(LedgerEntry {
            invocation_id,
            billed_gbs,
            cost_usd,
        });
        Ok(cost_usd)
    }

    pub fn total(&self) -> Decimal {
        self.total
    }

    pub fn ledger(&self) -> &[LedgerEntry] {
        &self.ledger
    }

    pub fn len(&self) -> usize {
        self.ledger.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ledger.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> Decimal {
        s.parse().unwrap()
    }

    #[test]
    fn closed_form_examples() {
        assert_eq!(invocation_cost(Decimal::ZERO).unwrap(), d("0.0000002"));
        assert_eq!(invocation_cost(d("3.0")).unwrap(), d("0.0000502001"));
        assert!(invocation_cost(d("-0.1")).is_err());
        assert_eq!(requests_per_dollar_for(Decimal::ZERO).unwrap(), 5_000_000);
    }

    #[test]
    fn densenet_warm_inverse() {
        let rpd = requests_per_dollar_for(d("2.7117")).unwrap();
        assert!((rpd as f64 - 22124.0).abs() / 22124.0 < 0.01, "{rpd}");
    }

    #[test]
    fn billing_unit_rounding() {
        assert_eq!(billed_gbs_for_duration(0, d("3")), d("0.3"));
        assert_eq!(billed_gbs_for_duration(101, d("1")), d("0.2"));
        assert_eq!(billed_gbs_for_duration(1000, d("0.128")), d("0.128"));
    }

    #[test]
    fn meter_total_is_exact_sum() {
        let mut m = CostMeter::new();
        for i in 0..1000u64 {
            m.charge(i, Decimal::new(i as i64, 1)).unwrap();
        }
        let sum: Decimal = m.ledger().iter().map(|e| e.cost_usd).sum();
        assert_eq!(sum, m.total());
    }
}
