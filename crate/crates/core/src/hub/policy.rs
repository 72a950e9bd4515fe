//! Offload policies and the allocator.
//!
//! Expected latencies compare only the parts that differ between targets:
//! local = KMS round trip + local execution under contention with one more
//! instance; remote = EWMA of observed platform e2e. Hub-side encryption is
//! common to both and left out.

use std::fmt;
use std::str::FromStr;

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use super::monitor::{Reservation, ResourceMonitor};
use super::{DeviceSpec, HubError};
use crate::clock::Millis;
use crate::faas_sim::FunctionId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    LatencyMin,
    BudgetCap,
    Balanced,
    /// Baseline: never offload.
    LocalOnly,
    /// Baseline: always offload.
    RemoteOnly,
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyKind::LatencyMin => "latency-min",
            PolicyKind::BudgetCap => "budget-cap",
            PolicyKind::Balanced => "balanced",
            PolicyKind::LocalOnly => "local-only",
            PolicyKind::RemoteOnly => "remote-only",
        })
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "latency-min" => PolicyKind::LatencyMin,
            "budget-cap" => PolicyKind::BudgetCap,
            "balanced" => PolicyKind::Balanced,
            "local-only" => PolicyKind::LocalOnly,
            "remote-only" => PolicyKind::RemoteOnly,
            _ => return Err(format!("unknown policy {s:?}")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffloadPolicy {
    pub kind: PolicyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monthly_budget_usd: Option<Decimal>,
    /// Weight of latency against cost for `Balanced`, in [0, 1].
    #[serde(default = "half")]
    pub balance_weight: f64,
}

fn half() -> f64 {
    0.5
}

impl OffloadPolicy {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            monthly_budget_usd: None,
            balance_weight: half(),
        }
    }

    pub fn budget_cap(budget: Decimal) -> Result<Self, HubError> {
        let p = Self {
            monthly_budget_usd: Some(budget),
            ..Self::new(PolicyKind::BudgetCap)
        };
        p.validate()?;
        Ok(p)
    }

    pub fn balanced(weight: f64) -> Result<Self, HubError> {
        let p = Self {
            balance_weight: weight,
            ..Self::new(PolicyKind::Balanced)
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), HubError> {
        let bad = |m: &str| Err(HubError::InvalidPolicy(m.to_string()));
        match self.kind {
            PolicyKind::BudgetCap => match self.monthly_budget_usd {
                None => return bad("budget-cap requires monthly_budget_usd"),
                Some(b) if b <= Decimal::ZERO => return bad("monthly budget must be > 0"),
                _ => {}
            },
            _ if self.monthly_budget_usd.is_some() => return bad("monthly_budget_usd only applies to budget-cap"),
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.balance_weight) {
            return bad("balance_weight must be in [0, 1]");
        }
        Ok(())
    }
}

impl Default for OffloadPolicy {
    fn default() -> Self {
        Self::new(PolicyKind::LatencyMin)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "target", rename_all = "snake_case")]
pub enum Target {
    Local { slot: usize },
    Remote { function_id: FunctionId },
    Queued,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffloadDecision {
    #[serde(flatten)]
    pub target: Target,
    pub policy_kind: PolicyKind,
    pub decided_at: Millis,
    pub expected_local_ms: Option<f64>,
    pub expected_remote_ms: Option<f64>,
}

/// Everything the allocator needs to know about one request.
#[derive(Debug, Clone)]
pub struct AllocationContext<'a> {
    pub now: Millis,
    pub device: &'a DeviceSpec,
    /// `None` when the device cannot run the app.
    pub local_exec_ms: Option<Millis>,
    pub local_mem_gb: f64,
    pub kms_ms: f64,
    /// Remaining service demand (ms at full speed) of each admitted local job.
    pub local_backlog: &'a [f64],
    pub function_id: Option<&'a FunctionId>,
    pub expected_remote_ms: f64,
    pub expected_remote_cost: Decimal,
    pub month_spend: Decimal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Choice {
    Local,
    Remote,
    Queued,
}

/// Sum of completion times, from now, of `works` sharing the device with no
/// further arrivals. Each of `n` active jobs progresses at `1 / c(n)`.
pub fn shared_completion_sum(works: &[f64], device: &DeviceSpec) -> f64 {
    let mut w: Vec<f64> = works.iter().map(|x| x.max(0.0)).collect();
    w.sort_by(f64::total_cmp);
    let (mut t, mut done, mut sum) = (0.0, 0.0, 0.0);
    for (i, &x) in w.iter().enumerate() {
        let active = w.len() - i;
        t += (x - done) * device.contention_factor(active);
        done = x;
        sum += t;
    }
    sum
}

/// Expected local latency of a new job: the KMS round trip plus the total
/// latency it adds to the device, its own and the slowdown of admitted jobs.
pub fn marginal_local_ms(exec_ms: f64, kms_ms: f64, backlog: &[f64], device: &DeviceSpec) -> f64 {
    let mut with = backlog.to_vec();
    with.push(exec_ms);
    kms_ms + shared_completion_sum(&with, device) - shared_completion_sum(backlog, device)
}

/// Decides where a request runs. A local decision holds the returned
/// reservation; it is taken under the monitor lock, so it cannot race.
pub fn allocate(
    ctx: &AllocationContext<'_>,
    monitor: &ResourceMonitor,
    policy: &OffloadPolicy,
) -> (OffloadDecision, Option<Reservation>) {
    let local_ok = ctx.local_exec_ms.is_some() && monitor.can_fit(ctx.local_mem_gb);
    let remote_ok = ctx.function_id.is_some();
    let exp_local = ctx
        .local_exec_ms
        .map(|e| marginal_local_ms(e as f64, ctx.kms_ms, ctx.local_backlog, ctx.device));
    let exp_remote = remote_ok.then_some(ctx.expected_remote_ms);
    let fallback = |local: bool| match (local, remote_ok) {
        (true, _) => Choice::Local,
        (false, true) => Choice::Remote,
        (false, false) => Choice::Queued,
    };

    let mut choice = match policy.kind {
        PolicyKind::LocalOnly if local_ok => Choice::Local,
        PolicyKind::LocalOnly => Choice::Queued,
        PolicyKind::RemoteOnly => fallback(false),
        PolicyKind::LatencyMin | PolicyKind::BudgetCap => match (exp_local, exp_remote) {
            (Some(l), Some(r)) => fallback(local_ok && l <= r),
            _ => fallback(local_ok),
        },
        PolicyKind::Balanced => match (exp_local, exp_remote) {
            (Some(l), Some(r)) => {
                let scale = l.max(r).max(f64::MIN_POSITIVE);
                let w = policy.balance_weight;
                let local_score = w * l / scale;
                let remote_score = w * r / scale + (1.0 - w);
                fallback(local_ok && local_score <= remote_score)
            }
            _ => fallback(local_ok),
        },
    };
    if policy.kind == PolicyKind::BudgetCap && choice == Choice::Remote {
        let budget = policy.monthly_budget_usd.unwrap_or(Decimal::ZERO);
        if ctx.month_spend + ctx.expected_remote_cost > budget {
            choice = if local_ok { Choice::Local } else { Choice::Queued };
        }
    }

    let mut reservation = None;
    let target = match choice {
        Choice::Local => match monitor.try_reserve(ctx.local_mem_gb) {
            Some(r) => {
                let slot = r.slot;
                reservation = Some(r);
                Target::Local { slot }
            }
            None => Target::Queued,
        },
        Choice::Remote => Target::Remote {
            function_id: ctx.function_id.expect("remote_ok").clone(),
        },
        Choice::Queued => Target::Queued,
    };
    (
        OffloadDecision {
            target,
            policy_kind: policy.kind,
            decided_at: ctx.now,
            expected_local_ms: exp_local,
            expected_remote_ms: exp_remote,
        },
        reservation,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hub::DeviceClass;

    const BACKLOG: [f64; 3] = [587.0; 3];

    fn ctx<'a>(device: &'a DeviceSpec, fid: Option<&'a FunctionId>, running: usize) -> AllocationContext<'a> {
        AllocationContext {
            now: 0,
            device,
            local_exec_ms: Some(587),
            local_mem_gb: 1.0,
            kms_ms: 206.0,
            local_backlog: &BACKLOG[..running],
            function_id: fid,
            expected_remote_ms: 851.0,
            expected_remote_cost: "0.0000452".parse().unwrap(),
            month_spend: Decimal::ZERO,
        }
    }

    #[test]
    fn latency_min_prefers_faster_jetson() {
        let dev = DeviceSpec::defaults(DeviceClass::JetsonNano);
        let m = ResourceMonitor::new(dev.clone(), None);
        let fid = FunctionId::new("f");
        let (d, r) = allocate(&ctx(&dev, Some(&fid), 0), &m, &OffloadPolicy::default());
        assert_eq!(d.target, Target::Local { slot: 0 });
        assert!(r.is_some());
        let (d, _) = allocate(&ctx(&dev, Some(&fid), 1), &m, &OffloadPolicy::default());
        assert!(matches!(d.target, Target::Remote { .. }));
    }

    #[test]
    fn full_device_forwards_to_remote() {
        let dev = DeviceSpec::defaults(DeviceClass::JetsonNano);
        let m = ResourceMonitor::new(dev.clone(), Some(0));
        let fid = FunctionId::new("f");
        let (d, r) = allocate(&ctx(&dev, Some(&fid), 0), &m, &OffloadPolicy::default());
        assert!(matches!(d.target, Target::Remote { .. }));
        assert!(r.is_none());
    }

    #[test]
    fn rpi_cannot_run_detection() {
        let dev = DeviceSpec::defaults(DeviceClass::RPi);
        let m = ResourceMonitor::new(dev.clone(), None);
        let fid = FunctionId::new("f");
        let mut c = ctx(&dev, Some(&fid), 0);
        c.local_exec_ms = None;
        let (d, _) = allocate(&c, &m, &OffloadPolicy::new(PolicyKind::LatencyMin));
        assert!(matches!(d.target, Target::Remote { .. }));
        let (d, _) = allocate(&c, &m, &OffloadPolicy::new(PolicyKind::LocalOnly));
        assert_eq!(d.target, Target::Queued);
    }

    #[test]
    fn budget_cap_exhausted_and_full_is_queued() {
        let dev = DeviceSpec::defaults(DeviceClass::JetsonNano);
        let m = ResourceMonitor::new(dev.clone(), Some(0));
        let fid = FunctionId::new("f");
        let policy = OffloadPolicy::budget_cap("1".parse().unwrap()).unwrap();
        let mut c = ctx(&dev, Some(&fid), 0);
        c.month_spend = "1".parse().unwrap();
        assert_eq!(allocate(&c, &m, &policy).0.target, Target::Queued);
        c.month_spend = "0.5".parse().unwrap();
        assert!(matches!(allocate(&c, &m, &policy).0.target, Target::Remote { .. }));
        let free = ResourceMonitor::new(dev.clone(), None);
        c.month_spend = "1".parse().unwrap();
        c.local_backlog = &BACKLOG;
        assert!(matches!(allocate(&c, &free, &policy).0.target, Target::Local { .. }));
    }

    #[test]
    fn balanced_weight_extremes() {
        let dev = DeviceSpec::defaults(DeviceClass::JetsonNano);
        let m = ResourceMonitor::new(dev.clone(), None);
        let fid = FunctionId::new("f");
        let c = ctx(&dev, Some(&fid), 3);
        let (d, r) = allocate(&c, &m, &OffloadPolicy::balanced(0.0).unwrap());
        assert!(matches!(d.target, Target::Local { .. }));
        m.release(r.unwrap());
        let (d, _) = allocate(&c, &m, &OffloadPolicy::balanced(1.0).unwrap());
        assert!(matches!(d.target, Target::Remote { .. }));
    }

    #[test]
    fn shared_completion_matches_hand_computation() {
        let dev = DeviceSpec::defaults(DeviceClass::JetsonNano);
        let c = dev.contention_factor(2);
        // 100 and 587 together: the short job ends at 100c, the long one
        // then runs alone for the remaining 487.
        let expect = 100.0 * c + (100.0 * c + 487.0);
        assert!((shared_completion_sum(&[587.0, 100.0], &dev) - expect).abs() < 1e-9);
        assert_eq!(shared_completion_sum(&[], &dev), 0.0);
        let m = marginal_local_ms(100.0, 206.0, &[587.0], &dev);
        assert!((m - (206.0 + expect - 587.0)).abs() < 1e-9);
    }

    #[test]
    fn policy_validation() {
        assert!(OffloadPolicy::budget_cap(Decimal::ZERO).is_err());
        assert!(OffloadPolicy::balanced(1.5).is_err());
        let mut p = OffloadPolicy::new(PolicyKind::BudgetCap);
        assert!(p.validate().is_err());
        p.monthly_budget_usd = Some(Decimal::ONE);
        assert!(p.validate().is_ok());
        assert_eq!("latency-min".parse::<PolicyKind>().unwrap(), PolicyKind::LatencyMin);
    }
}
