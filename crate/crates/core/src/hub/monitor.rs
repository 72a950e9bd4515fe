//! Local slot and memory accounting with atomic reserve/release.

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{DeviceClass, DeviceSpec};

const MEM_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorSnapshot {
    pub device_class: DeviceClass,
    pub total_slots: usize,
    pub total_mem_gb: f64,
    pub in_use_slots: usize,
    pub in_use_mem_gb: f64,
}

/// A held local slot. Must be returned through [`ResourceMonitor::release`].
#[derive(Debug, PartialEq)]
pub struct Reservation {
    pub slot: usize,
    pub mem_gb: f64,
}

#[derive(Debug)]
struct Inner {
    slots: Vec<bool>,
    mem_used: f64,
}

#[derive(Debug)]
pub struct ResourceMonitor {
    device: DeviceSpec,
    inner: Mutex<Inner>,
}

impl ResourceMonitor {
    /// `max_local` caps usable slots below the device total.
    pub fn new(device: DeviceSpec, max_local: Option<usize>) -> Self {
        let slots = max_local.map_or(device.total_slots, |m| m.min(device.total_slots));
        Self {
            device,
            inner: Mutex::new(Inner {
                slots: vec![false; slots],
                mem_used: 0.0,
            }),
        }
    }

    pub fn device(&self) -> &DeviceSpec {
        &self.device
    }

    pub fn total_slots(&self) -> usize {
        self.inner.lock().slots.len()
    }

    pub fn can_fit(&self, mem_gb: f64) -> bool {
        let g = self.inner.lock();
        g.slots.iter().any(|b| !b) && g.mem_used + mem_gb <= self.device.total_mem_gb + MEM_EPS
    }

    pub fn try_reserve(&self, mem_gb: f64) -> Option<Reservation> {
        let mut g = self.inner.lock();
        if g.mem_used + mem_gb > self.device.total_mem_gb + MEM_EPS {
            return None;
        }
        let slot = g.slots.iter().position(|b| !b)?;
        g.slots[slot] = true;
        g.mem_used += mem_gb;
        Some(Reservation { slot, mem_gb })
    }

    pub fn release(&self, r: Reservation) {
        let mut g = self.inner.lock();
        assert!(g.slots[r.slot], "slot {} released twice", r.slot);
        g.slots[r.slot] = false;
        g.mem_used = (g.mem_used - r.mem_gb).max(0.0);
        if g.slots.iter().all(|b| !b) {
            g.mem_used = 0.0;
        }
    }

    pub fn snapshot(&self) -> MonitorSnapshot {
        let g = self.inner.lock();
        MonitorSnapshot {
            device_class: self.device.class.clone(),
            total_slots: g.slots.len(),
            total_mem_gb: self.device.total_mem_gb,
            in_use_slots: g.slots.iter().filter(|b| **b).count(),
            in_use_mem_gb: g.mem_used,
        }
    }
}
