//! Local emulator of a pay-per-invocation function platform.
//!
//! Instances are reserved in virtual time: an invocation submitted at `now`
//! occupies its instance until `now + e2e_ms`. Submission times are clamped
//! to be non-decreasing.

pub mod cost;
pub mod http;
pub mod profile;
pub mod sandbox;
pub mod service;
pub mod synthetic;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::{Millis, MINUTE_MS};
use crate::envelope::{open_data, seal_result, AppId, AppPrivateKey, KmsId, SealedData, WrappedKey};
use crate::kms::{Decision, KmsClient};

pub use cost::{invocation_cost, requests_per_dollar, requests_per_dollar_for, CostMeter, LedgerEntry};
pub use profile::{default_catalog, ServedState, WorkloadProfile};
pub use sandbox::{adler32, builtin_natives, AppBehavior, AppError, Sandbox, SandboxViolation};
pub use service::{FaasEndpoint, PlatformHandle};
pub use synthetic::{encode_frame, synthetic_inference, InferenceResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Error)]
#[serde(tag = "error", rename_all = "snake_case")]
pub enum FaasError {
    #[error("unknown function {function_id}")]
    UnknownFunction { function_id: FunctionId },
    #[error("function {function_id} already deployed")]
    DuplicateFunction { function_id: FunctionId },
    #[error("memory {memory_gb} GB outside [0.128, 3.0]")]
    MemoryOutOfRange { memory_gb: Decimal },
    #[error("unknown behavior {name}")]
    UnknownBehavior { name: String },
    #[error("native function {name} already registered")]
    DuplicateNative { name: String },
    #[error("no connection to KMS {kms_id}")]
    UnknownKms { kms_id: KmsId },
    #[error("invalid profile {name}: {reason}")]
    InvalidProfile { name: String, reason: String },
    #[error("negative billed duration {0}")]
    NegativeBilling(Decimal),
    #[error("invalid package: {reason}")]
    InvalidPackage { reason: String },
    #[error("instance cap reached for {function_id}")]
    CapacityExhausted { function_id: FunctionId },
    #[error("transport: {message}")]
    Transport { message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FunctionId(String);

impl FunctionId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn for_app(app_id: &AppId) -> Self {
        Self(format!("fn-{app_id}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for FunctionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Reference to the code a package runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorRef {
    Profile(String),
    Native(String),
}

impl fmt::Display for BehaviorRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BehaviorRef::Profile(n) => write!(f, "profile:{n}"),
            BehaviorRef::Native(n) => write!(f, "native:{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KmsIdentity {
    pub kms_id: KmsId,
    pub endpoint: String,
}

pub fn min_memory_gb() -> Decimal {
    Decimal::new(128, 3)
}

pub fn max_memory_gb() -> Decimal {
    Decimal::from(3)
}

/// Deployable unit. The app private key is the only key material it holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionPackage {
    pub function_id: FunctionId,
    pub app_id: AppId,
    pub app_function: BehaviorRef,
    pub kms_identity: KmsIdentity,
    pub app_private_key: AppPrivateKey,
    pub memory_gb: Decimal,
}

impl FunctionPackage {
    pub fn validate(&self) -> Result<(), FaasError> {
        if self.memory_gb < min_memory_gb() || self.memory_gb > max_memory_gb() {
            return Err(FaasError::MemoryOutOfRange {
                memory_gb: self.memory_gb,
            });
        }
        if self.function_id.as_str().is_empty() {
            return Err(FaasError::InvalidPackage {
                reason: "empty function_id".into(),
            });
        }
        Ok(())
    }

    /// Deterministic serialized form; field order is fixed by the struct.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("package serializes")
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_bytes()))
    }
}

/// Wire payload of one invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvocationRequest {
    pub app_id: AppId,
    pub request_id: String,
    pub encrypted_data: SealedData,
    pub encrypted_key: WrappedKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvocationKind {
    Request,
    KeepAlive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InvocationFailure {
    KmsDenied { decision: Decision },
    KmsUnavailable { message: String },
    DecryptFailed,
    Sandbox { violation: SandboxViolation },
    AppFailed { message: String },
    BadRequest { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum InvocationOutcome {
    Ok { result: SealedData },
    KeepAlive,
    Error { failure: InvocationFailure },
}

impl InvocationOutcome {
    pub fn is_ok(&self) -> bool {
        !matches!(self, InvocationOutcome::Error { .. })
    }

    pub fn status(&self) -> &'static str {
        match self {
            InvocationOutcome::Ok { .. } => "ok",
            InvocationOutcome::KeepAlive => "keep_alive",
            InvocationOutcome::Error { .. } => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvocationRecord {
    pub invocation_id: u64,
    pub function_id: FunctionId,
    pub request_id: Option<String>,
    pub kind: InvocationKind,
    pub instance_id: u64,
    pub served_state: ServedState,
    pub submitted_at: Millis,
    pub completed_at: Millis,
    pub e2e_ms: Millis,
    pub network_ms: Millis,
    pub init_ms: Millis,
    pub kms_ms: Millis,
    pub exec_ms: Millis,
    pub billed_gbs: Decimal,
    pub cost_usd: Decimal,
    pub outcome: InvocationOutcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstanceState {
    Cold,
    Initializing,
    Warm,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionInstance {
    pub instance_id: u64,
    pub function_id: FunctionId,
    pub state: InstanceState,
    pub created_at: Millis,
    pub ready_at: Millis,
    pub last_invoked_at: Millis,
    pub busy_until: Millis,
    pub served: u64,
}

impl FunctionInstance {
    pub fn busy(&self, now: Millis) -> bool {
        self.busy_until > now
    }

    fn refresh(&mut self, now: Millis) {
        if self.state == InstanceState::Initializing && now >= self.ready_at {
            self.state = InstanceState::Warm;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceChannel {
    /// Invocation payload as received from the hub.
    Inbound,
    /// Wrapped key forwarded to the KMS.
    KmsRequest,
    /// Response returned to the hub.
    Outbound,
}

/// Bytes observable by the platform operator, i.e. outside the sandbox and
/// outside the runtime's TLS session with the KMS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub invocation_id: u64,
    pub channel: TraceChannel,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlatformConfig {
    pub idle_threshold_ms: Millis,
    pub network_overhead_ms: Millis,
    /// Uniform jitter in `[-j, +j]` added to the network overhead.
    pub network_jitter_ms: Millis,
    pub instance_cap: Option<usize>,
    pub seed: u64,
    pub noop_exec_ms: Millis,
    pub native_exec_ms: Millis,
    pub native_cold_init_ms: Millis,
    pub scratch_bytes: usize,
    pub capture_trace: bool,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        Self {
            idle_threshold_ms: 26 * MINUTE_MS,
            network_overhead_ms: 190,
            network_jitter_ms: 20,
            instance_cap: None,
            seed: 0,
            noop_exec_ms: 5,
            native_exec_ms: 20,
            native_cold_init_ms: 250,
            scratch_bytes: sandbox::DEFAULT_SCRATCH_BYTES,
            capture_trace: false,
        }
    }
}

#[derive(Debug, Clone)]
enum Deployed {
    Profile(WorkloadProfile),
    Native(AppBehavior),
}

struct Deployment {
    package: FunctionPackage,
    behavior: Deployed,
    instances: Vec<FunctionInstance>,
    expired: u64,
}

impl Deployment {
    fn cold_init_ms(&self, config: &PlatformConfig) -> Millis {
        match &self.behavior {
            Deployed::Profile(p) => p.cold_init_ms,
            Deployed::Native(_) => config.native_cold_init_ms,
        }
    }

    fn exec_ms(&self, config: &PlatformConfig) -> Millis {
        match &self.behavior {
            Deployed::Profile(p) => p.warm_exec_ms,
            Deployed::Native(_) => config.native_exec_ms,
        }
    }
}

/// Emulator state. Owned by a single context; see [`PlatformHandle`] for
/// shared access.
pub struct Platform {
    config: PlatformConfig,
    catalog: BTreeMap<String, WorkloadProfile>,
    natives: BTreeMap<String, AppBehavior>,
    kms: BTreeMap<KmsId, Arc<dyn KmsClient>>,
    deployments: BTreeMap<FunctionId, Deployment>,
    rng: ChaCha8Rng,
    meter: CostMeter,
    trace: Vec<TraceEntry>,
    next_instance: u64,
    next_invocation: u64,
    now: Millis,
}

impl fmt::Debug for Platform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Platform")
            .field("config", &self.config)
            .field("functions", &self.deployments.keys().collect::<Vec<_>>())
            .field("now", &self.now)
            .finish_non_exhaustive()
    }
}

impl Platform {
    pub fn new(config: PlatformConfig) -> Self {
        Self::with_catalog(config, default_catalog())
    }

    pub fn with_catalog(config: PlatformConfig, catalog: BTreeMap<String, WorkloadProfile>) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            catalog,
            natives: sandbox::builtin_natives()
                .into_iter()
                .map(|(n, b)| (n.to_string(), b))
                .collect(),
            kms: BTreeMap::new(),
            deployments: BTreeMap::new(),
            meter: CostMeter::new(),
            trace: Vec::new(),
            next_instance: 0,
            next_invocation: 0,
            now: 0,
        }
    }

    pub fn config(&self) -> &PlatformConfig {
        &self.config
    }

    pub fn now(&self) -> Millis {
        self.now
    }

    pub fn add_profile(&mut self, profile: WorkloadProfile) -> Result<(), FaasError> {
        profile.validate()?;
        self.catalog.insert(profile.name.clone(), profile);
        Ok(())
    }

    pub fn profile(&self, name: &str) -> Option<&WorkloadProfile> {
        self.catalog.get(name)
    }

    /// Makes a KMS reachable from function runtimes.
    pub fn connect_kms(&mut self, client: Arc<dyn KmsClient>) -> Result<KmsId, FaasError> {
        let pk = client.get_public_key().map_err(|e| FaasError::Transport {
            message: e.to_string(),
        })?;
        self.kms.insert(pk.kms_id.clone(), client);
        Ok(pk.kms_id)
    }

    pub fn register_native_function(&mut self, name: &str, behavior: AppBehavior) -> Result<(), FaasError> {
        if self.natives.contains_key(name) {
            return Err(FaasError::DuplicateNative { name: name.to_string() });
        }
        self.natives.insert(name.to_string(), behavior);
        Ok(())
    }

    pub fn deploy(&mut self, package: FunctionPackage) -> Result<FunctionId, FaasError> {
        package.validate()?;
        if self.deployments.contains_key(&package.function_id) {
            return Err(FaasError::DuplicateFunction {
                function_id: package.function_id.clone(),
            });
        }
        let behavior = match &package.app_function {
            BehaviorRef::Profile(n) => self.catalog.get(n).cloned().map(Deployed::Profile),
            BehaviorRef::Native(n) => self.natives.get(n).cloned().map(Deployed::Native),
        }
        .ok_or_else(|| FaasError::UnknownBehavior {
            name: package.app_function.to_string(),
        })?;
        if !self.kms.contains_key(&package.kms_identity.kms_id) {
            return Err(FaasError::UnknownKms {
                kms_id: package.kms_identity.kms_id.clone(),
            });
        }
        let id = package.function_id.clone();
        tracing::debug!(function_id = %id, behavior = %package.app_function, "deployed");
        self.deployments.insert(
            id.clone(),
            Deployment {
                package,
                behavior,
                instances: Vec::new(),
                expired: 0,
            },
        );
        Ok(id)
    }

    pub fn remove(&mut self, function_id: &FunctionId) -> Result<(), FaasError> {
        self.deployments
            .remove(function_id)
            .map(|_| ())
            .ok_or_else(|| unknown(function_id))
    }

    pub fn is_deployed(&self, function_id: &FunctionId) -> bool {
        self.deployments.contains_key(function_id)
    }

    /// Expires every idle warm instance unused for longer than the threshold.
    pub fn expire_idle(&mut self, now: Millis) -> usize {
        let now = self.advance(now);
        self.expire_at(now)
    }

    fn expire_at(&mut self, now: Millis) -> usize {
        let threshold = self.config.idle_threshold_ms;
        let mut count = 0;
        for dep in self.deployments.values_mut() {
            for inst in &mut dep.instances {
                inst.refresh(now);
                if inst.state == InstanceState::Warm
                    && !inst.busy(now)
                    && now.saturating_sub(inst.last_invoked_at) > threshold
                {
                    inst.state = InstanceState::Expired;
                    count += 1;
                }
            }
            let before = dep.instances.len();
            dep.instances.retain(|i| i.state != InstanceState::Expired);
            dep.expired += (before - dep.instances.len()) as u64;
        }
        count
    }

    fn advance(&mut self, now: Millis) -> Millis {
        self.now = self.now.max(now);
        self.now
    }

    /// Live (non-expired) instances of a function.
    pub fn instances(&self, function_id: &FunctionId) -> Vec<FunctionInstance> {
        self.deployments
            .get(function_id)
            .map(|d| d.instances.clone())
            .unwrap_or_default()
    }

    pub fn expired_count(&self, function_id: &FunctionId) -> u64 {
        self.deployments.get(function_id).map_or(0, |d| d.expired)
    }

    pub fn meter(&self) -> &CostMeter {
        &self.meter
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    fn jitter(&mut self) -> Millis {
        let j = self.config.network_jitter_ms as i64;
        let base = self.config.network_overhead_ms as i64;
        let delta = if j == 0 { 0 } else { self.rng.gen_range(-j..=j) };
        (base + delta).max(0) as Millis
    }

    /// Picks the lowest-id idle warm instance or creates a cold one; returns
    /// its index and the state it serves in.
    fn acquire(&mut self, function_id: &FunctionId, now: Millis) -> Result<(usize, ServedState), FaasError> {
        let live: usize = self.deployments.values().map(|d| d.instances.len()).sum();
        let cap = self.config.instance_cap;
        let dep = self.deployments.get_mut(function_id).ok_or_else(|| unknown(function_id))?;
        for inst in &mut dep.instances {
            inst.refresh(now);
        }
        if let Some(idx) = dep
            .instances
            .iter()
            .position(|i| i.state == InstanceState::Warm && !i.busy(now))
        {
            return Ok((idx, ServedState::Warm));
        }
        if cap.is_some_and(|c| live >= c) {
            return Err(FaasError::CapacityExhausted {
                function_id: function_id.clone(),
            });
        }
        dep.instances.push(FunctionInstance {
            instance_id: self.next_instance,
            function_id: function_id.clone(),
            state: InstanceState::Cold,
            created_at: now,
            ready_at: now,
            last_invoked_at: now,
            busy_until: now,
            served: 0,
        });
        self.next_instance += 1;
        Ok((dep.instances.len() - 1, ServedState::Cold))
    }

    fn record_trace(&mut self, invocation_id: u64, channel: TraceChannel, bytes: impl FnOnce() -> Vec<u8>) {
        if self.config.capture_trace {
            self.trace.push(TraceEntry {
                invocation_id,
                channel,
                bytes: bytes(),
            });
        }
    }

    /// Serves one invocation at virtual time `now`.
    pub fn invoke(
        &mut self,
        function_id: &FunctionId,
        request: &InvocationRequest,
        now: Millis,
    ) -> Result<InvocationRecord, FaasError> {
        self.dispatch(function_id, Some(request), now)
    }

    /// No-op invocation that only keeps an instance warm.
    pub fn keep_alive(&mut self, function_id: &FunctionId, now: Millis) -> Result<InvocationRecord, FaasError> {
        self.dispatch(function_id, None, now)
    }

    fn dispatch(
        &mut self,
        function_id: &FunctionId,
        request: Option<&InvocationRequest>,
        now: Millis,
    ) -> Result<InvocationRecord, FaasError> {
        let now = self.advance(now);
        self.expire_at(now);
        let (idx, served_state) = self.acquire(function_id, now)?;
        let invocation_id = self.next_invocation;
        self.next_invocation += 1;
        let network_ms = self.jitter();

        let (outcome, kms_ms, exec_ms) = match request {
            Some(req) => {
                self.record_trace(invocation_id, TraceChannel::Inbound, || {
                    serde_json::to_vec(req).expect("request serializes")
                });
                self.run_runtime(function_id, req, invocation_id)
            }
            None => (InvocationOutcome::KeepAlive, 0, self.config.noop_exec_ms),
        };

        let dep = &self.deployments[function_id];
        let memory = dep.package.memory_gb;
        let init_ms = match served_state {
            ServedState::Cold => dep.cold_init_ms(&self.config),
            ServedState::Warm => 0,
        };
        let billed_gbs = match (&outcome, &dep.behavior) {
            (InvocationOutcome::Ok { .. }, Deployed::Profile(p)) => p.billed_gbs_at(served_state, memory),
            (InvocationOutcome::Ok { .. }, Deployed::Native(_)) => {
                cost::billed_gbs_for_duration(init_ms + kms_ms + exec_ms, memory)
            }
            _ => cost::billed_gbs_for_duration(kms_ms + exec_ms, memory),
        };
        let cost_usd = self.meter.charge(invocation_id, billed_gbs)?;
        let e2e_ms = network_ms + init_ms + kms_ms + exec_ms;
        let completed_at = now + e2e_ms;

        let dep = self.deployments.get_mut(function_id).expect("acquired above");
        let inst = &mut dep.instances[idx];
        if served_state == ServedState::Cold {
            inst.state = InstanceState::Initializing;
            inst.ready_at = now + network_ms + init_ms;
        }
        inst.busy_until = completed_at;
        inst.last_invoked_at = completed_at;
        inst.served += 1;
        let instance_id = inst.instance_id;

        self.record_trace(invocation_id, TraceChannel::Outbound, || {
            serde_json::to_vec(&outcome).expect("outcome serializes")
        });
        Ok(InvocationRecord {
            invocation_id,
            function_id: function_id.clone(),
            request_id: request.map(|r| r.request_id.clone()),
            kind: if request.is_some() {
                InvocationKind::Request
            } else {
                InvocationKind::KeepAlive
            },
            instance_id,
            served_state,
            submitted_at: now,
            completed_at,
            e2e_ms,
            network_ms,
            init_ms,
            kms_ms,
            exec_ms,
            billed_gbs,
            cost_usd,
            outcome,
        })
    }

    /// Remote runtime: fetch K from the KMS, open the payload, run the app in
    /// its sandbox, seal the result under K.
    fn run_runtime(
        &mut self,
        function_id: &FunctionId,
        req: &InvocationRequest,
        invocation_id: u64,
    ) -> (InvocationOutcome, Millis, Millis) {
        let fail = |failure| InvocationOutcome::Error { failure };
        let dep = &self.deployments[function_id];
        if req.app_id != dep.package.app_id {
            let message = format!("payload for {} sent to {}", req.app_id, dep.package.app_id);
            return (fail(InvocationFailure::BadRequest { message }), 0, 0);
        }
        let client = Arc::clone(&self.kms[&dep.package.kms_identity.kms_id]);
        let endpoint = dep.package.kms_identity.endpoint.clone();
        let private: AppPrivateKey = dep.package.app_private_key.clone();
        let behavior = dep.behavior.clone();
        let exec_ms = dep.exec_ms(&self.config);
        let scratch = self.config.scratch_bytes;

        self.record_trace(invocation_id, TraceChannel::KmsRequest, || {
            req.encrypted_key.to_canonical_json().into_bytes()
        });
        let kms_ms = client.response_latency_ms();
        let key = match client.decrypt_data_key(&req.app_id, &req.request_id, &req.encrypted_key) {
            Ok(k) => k,
            Err(e) => {
                let failure = match e.decision() {
                    Some(decision) => InvocationFailure::KmsDenied { decision },
                    None => InvocationFailure::KmsUnavailable { message: e.to_string() },
                };
                return (fail(failure), kms_ms, 0);
            }
        };
        let plaintext = match open_data(&req.encrypted_data, &key, &private) {
            Ok(p) => zeroize::Zeroizing::new(p),
            Err(_) => return (fail(InvocationFailure::DecryptFailed), kms_ms, 0),
        };
        let mut sb = Sandbox::new(&plaintext, &endpoint, scratch);
        let out = match &behavior {
            Deployed::Profile(_) => Ok(synthetic_inference(sb.stdin()).to_json_bytes()),
            Deployed::Native(b) => b.run(&mut sb),
        };
        let violation = sb.violations().first().cloned().or_else(|| match &out {
            Err(AppError::Violation(v)) => Some(v.clone()),
            _ => None,
        });
        let outcome = match (violation, out) {
            (Some(violation), _) => {
                tracing::warn!(%function_id, %violation, "app terminated");
                fail(InvocationFailure::Sandbox { violation })
            }
            (None, Err(e)) => fail(InvocationFailure::AppFailed { message: e.to_string() }),
            (None, Ok(bytes)) => match seal_result(&bytes, &key) {
                Ok(result) => InvocationOutcome::Ok { result },
                Err(e) => fail(InvocationFailure::AppFailed { message: e.to_string() }),
            },
        };
        (outcome, kms_ms, exec_ms)
    }
}

fn unknown(function_id: &FunctionId) -> FaasError {
    FaasError::UnknownFunction {
        function_id: function_id.clone(),
    }
}

#[cfg(test)]
mod tests;
