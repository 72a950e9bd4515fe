//! In-process deployment used by experiments and tests: one virtual clock,
//! an in-memory KMS, the emulated platform and provisioned apps.

use std::sync::Arc;

use rust_decimal::Decimal;

use crate::clock::VirtualClock;
use crate::envelope::{generate_app_keypair, AppId};
use crate::faas_sim::{
    default_catalog, BehaviorRef, FaasEndpoint, FaasError, FunctionId, FunctionPackage, KmsIdentity, Platform,
    PlatformConfig, PlatformHandle, WorkloadProfile,
};
use crate::hub::{AppBinding, HubConfig, HubError, HubSim};
use crate::kms::{Kms, KmsConfig};

#[derive(Clone)]
pub struct World {
    pub clock: VirtualClock,
    pub kms: Arc<Kms>,
    pub platform: PlatformHandle,
}

impl std::fmt::Debug for World {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("World").field("kms", self.kms.kms_id()).finish_non_exhaustive()
    }
}

/// Options for [`World::provision`].
#[derive(Debug, Clone)]
pub struct AppSpec {
    pub name: String,
    pub profile: String,
    pub deploy: bool,
    pub memory_gb: Decimal,
    pub item_id: Option<String>,
    pub source_device: Option<String>,
    pub keep_alive: bool,
}

impl AppSpec {
    pub fn new(name: &str, profile: &str) -> Self {
        Self {
            name: name.into(),
            profile: profile.into(),
            deploy: true,
            memory_gb: Decimal::new(3, 0),
            item_id: None,
            source_device: None,
            keep_alive: false,
        }
    }
}

impl World {
    pub fn new(platform: PlatformConfig, kms_latency_ms: u64) -> Result<Self, HubError> {
        let clock = VirtualClock::new(0);
        let kms = Arc::new(Kms::in_memory(
            KmsConfig::default().with_latency(kms_latency_ms),
            Arc::new(clock.clone()),
        )?);
        let mut p = Platform::new(platform);
        p.connect_kms(kms.clone())?;
        Ok(Self {
            clock,
            kms,
            platform: PlatformHandle::spawn(p),
        })
    }

    pub fn profile(name: &str) -> Result<WorkloadProfile, HubError> {
        default_catalog().remove(name).ok_or_else(|| {
            HubError::Faas(FaasError::UnknownBehavior { name: name.to_string() })
        })
    }

    /// Generates keys, registers them at the KMS and optionally deploys.
    pub fn provision(&self, spec: &AppSpec) -> Result<AppBinding, HubError> {
        let app_id = AppId::new(spec.name.clone())?;
        let app = generate_app_keypair(&app_id)?;
        self.kms.register_app(&app_id, &app.material())?;
        let profile = Self::profile(&spec.profile)?;
        let function_id = if spec.deploy {
            let pkg = FunctionPackage {
                function_id: FunctionId::for_app(&app_id),
                app_id: app_id.clone(),
                app_function: BehaviorRef::Profile(spec.profile.clone()),
                kms_identity: KmsIdentity {
                    kms_id: self.kms.kms_id().clone(),
                    endpoint: "in-process".into(),
                },
                app_private_key: app.private.clone(),
                memory_gb: spec.memory_gb,
            };
            Some(self.platform.deploy(&pkg)?)
        } else {
            None
        };
        Ok(AppBinding {
            kms_public: Kms::get_public_key(&self.kms),
            app,
            profile,
            function_id,
            memory_gb: spec.memory_gb,
            item_id: spec.item_id.clone(),
            source_device: spec.source_device.clone(),
            keep_alive: spec.keep_alive,
        })
    }

    pub fn hub(&self, config: HubConfig) -> Result<HubSim, HubError> {
        let faas: Arc<dyn FaasEndpoint> = Arc::new(self.platform.clone());
        Ok(HubSim::new(config, self.kms.clone(), Some(faas))?.with_clock(self.clock.clone()))
    }

    /// Emulator ledger total.
    pub fn billed_total(&self) -> Result<Decimal, HubError> {
        Ok(self.platform.call(|p| p.meter().total())?)
    }
}
