//! The local hub: data queue, resource allocator, local and remote
//! execution, result handling and the keep-alive warmer.

pub mod device;
pub mod monitor;
pub mod policy;
pub mod queue;
pub mod sim;

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use device::{CryptoCost, DeviceClass, DeviceSpec};
pub use monitor::{MonitorSnapshot, Reservation, ResourceMonitor};
pub use policy::{allocate, AllocationContext, OffloadDecision, OffloadPolicy, PolicyKind, Target};
pub use queue::{BoundedQueue, DEFAULT_QUEUE_CAPACITY};
pub use sim::{HubLogEvent, HubSim, RequestOutcome, TargetKind};

use crate::clock::{Millis, MINUTE_MS};
use crate::envelope::{
    b64, generate_data_key, open_data, open_result, wrap_data_key, AppId, AppKeyPair, DataKey,
    EnvelopeError, KmsPublicKey, DEFAULT_MAX_PAYLOAD,
};
use crate::faas_sim::{
    synthetic_inference, FaasEndpoint, FaasError, FunctionId, InvocationFailure, InvocationOutcome,
    InvocationRecord, InvocationRequest, WorkloadProfile,
};
use crate::kms::{KmsClient, KmsError};
use crate::rules::RuleError;

#[derive(Debug, Error)]
pub enum HubError {
    #[error("data queue full (capacity {capacity})")]
    QueueFull { capacity: usize },
    #[error("payload of {size} bytes exceeds {max}")]
    PayloadTooLarge { size: usize, max: usize },
    #[error("unknown app {0}")]
    UnknownApp(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("app {0} has no remote deployment")]
    NotDeployed(String),
    #[error("remote invocation failed: {0:?}")]
    Remote(InvocationFailure),
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
    #[error(transparent)]
    Faas(#[from] FaasError),
    #[error(transparent)]
    Kms(#[from] KmsError),
    #[error(transparent)]
    Rules(#[from] RuleError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventBody {
    Data {
        #[serde(with = "b64")]
        payload: Vec<u8>,
    },
    StateChange {
        from: String,
        to: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceEvent {
    pub device_id: String,
    pub kind: String,
    #[serde(flatten)]
    pub body: EventBody,
    pub arrived_at: Millis,
}

impl DeviceEvent {
    pub fn data(device_id: &str, kind: &str, payload: Vec<u8>, at: Millis) -> Self {
        Self {
            device_id: device_id.into(),
            kind: kind.into(),
            body: EventBody::Data { payload },
            arrived_at: at,
        }
    }

    pub fn state_change(device_id: &str, from: &str, to: &str, at: Millis) -> Self {
        Self {
            device_id: device_id.into(),
            kind: "state".into(),
            body: EventBody::StateChange {
                from: from.into(),
                to: to.into(),
            },
            arrived_at: at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub request_id: String,
    pub app_id: AppId,
    #[serde(with = "b64")]
    pub payload: Vec<u8>,
    pub enqueued_at: Millis,
    pub deadline_hint: Option<Millis>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TerminalState {
    LocalDone,
    RemoteDone,
    Errored,
}

/// An app the hub can serve: its keys, timing model, optional remote
/// deployment and the rule item its results update.
#[derive(Debug, Clone)]
pub struct AppBinding {
    pub app: AppKeyPair,
    pub kms_public: KmsPublicKey,
    pub profile: WorkloadProfile,
    pub function_id: Option<FunctionId>,
    pub memory_gb: Decimal,
    pub item_id: Option<String>,
    /// Device whose latest data payload feeds commands sent to `item_id`.
    pub source_device: Option<String>,
    pub keep_alive: bool,
}

impl AppBinding {
    pub fn app_id(&self) -> &AppId {
        &self.app.app_id
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HubConfig {
    pub kms_url: Option<String>,
    pub faas_endpoint: Option<String>,
    /// 0 disables keep-alive.
    pub keep_alive_period_min: u64,
    pub queue_capacity: usize,
    pub device_class: DeviceClass,
    pub max_local: Option<usize>,
    pub policy: OffloadPolicy,
    pub ewma_alpha: f64,
    /// Requests time out after this multiple of the profile's cold e2e.
    pub timeout_factor: u64,
    /// FaaS idle threshold the keep-alive warmer plans against.
    pub idle_threshold_ms: Millis,
    pub network_overhead_ms: Millis,
    /// Local execution times vary uniformly by ±this fraction.
    pub local_jitter_frac: f64,
    /// `LocalOnly` rejects instead of queueing when the device is full.
    pub reject_when_full: bool,
    pub max_payload: usize,
    pub seed: u64,
}

impl Default for HubConfig {
    fn default() -> Self {
        Self {
            kms_url: None,
            faas_endpoint: None,
            keep_alive_period_min: 0,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            device_class: DeviceClass::JetsonNano,
            max_local: None,
            policy: OffloadPolicy::default(),
            ewma_alpha: 0.2,
            timeout_factor: 5,
            idle_threshold_ms: 26 * MINUTE_MS,
            network_overhead_ms: 190,
            local_jitter_frac: 0.05,
            reject_when_full: false,
            max_payload: DEFAULT_MAX_PAYLOAD,
            seed: 0,
        }
    }
}

impl HubConfig {
    pub fn keep_alive_period_ms(&self) -> Option<Millis> {
        (self.keep_alive_period_min > 0).then(|| self.keep_alive_period_min * MINUTE_MS)
    }
}

/// Hub side of an invocation: fresh data key, sealed payload, wrapped key.
pub fn prepare_invocation(
    app: &AppKeyPair,
    kms_public: &KmsPublicKey,
    request_id: &str,
    payload: &[u8],
    max_payload: usize,
) -> Result<(InvocationRequest, DataKey), HubError> {
    let key = generate_data_key()?;
    let encrypted_data = crate::envelope::seal_data_limited(payload, &app.public, &key, max_payload)?;
    let encrypted_key = wrap_data_key(&key, app, kms_public)?;
    Ok((
        InvocationRequest {
            app_id: app.app_id.clone(),
            request_id: request_id.to_string(),
            encrypted_data,
            encrypted_key,
        },
        key,
    ))
}

#[derive(Debug, Clone)]
pub struct RemoteResult {
    pub plaintext: Vec<u8>,
    pub record: InvocationRecord,
}

/// Full client side of one remote invocation.
pub fn invoke_remote(
    request: &Request,
    binding: &AppBinding,
    faas: &dyn FaasEndpoint,
    at: Option<Millis>,
) -> Result<RemoteResult, HubError> {
    let function_id = binding
        .function_id
        .as_ref()
        .ok_or_else(|| HubError::NotDeployed(binding.app_id().to_string()))?;
    let (wire, key) = prepare_invocation(
        &binding.app,
        &binding.kms_public,
        &request.request_id,
        &request.payload,
        DEFAULT_MAX_PAYLOAD,
    )?;
    let record = faas.invoke(function_id, &wire, at)?;
    let plaintext = open_remote_outcome(&record, &key)?;
    Ok(RemoteResult { plaintext, record })
}

pub(crate) fn open_remote_outcome(record: &InvocationRecord, key: &DataKey) -> Result<Vec<u8>, HubError> {
    match &record.outcome {
        InvocationOutcome::Ok { result } => Ok(open_result(result, key)?),
        InvocationOutcome::Error { failure } => Err(HubError::Remote(failure.clone())),
        InvocationOutcome::KeepAlive => Err(HubError::Remote(InvocationFailure::BadRequest {
            message: "keep-alive response to a request".into(),
        })),
    }
}

/// Local executor: the same envelope and KMS steps as the remote runtime,
/// then the profile's synthetic inference on the hub.
pub fn invoke_local(
    request: &Request,
    binding: &AppBinding,
    kms: &dyn KmsClient,
) -> Result<Vec<u8>, HubError> {
    let (wire, _) = prepare_invocation(
        &binding.app,
        &binding.kms_public,
        &request.request_id,
        &request.payload,
        DEFAULT_MAX_PAYLOAD,
    )?;
    run_local_runtime(&wire, binding, kms)
}

pub(crate) fn run_local_runtime(
    wire: &InvocationRequest,
    binding: &AppBinding,
    kms: &dyn KmsClient,
) -> Result<Vec<u8>, HubError> {
    let key = kms.decrypt_data_key(&wire.app_id, &wire.request_id, &wire.encrypted_key)?;
    let plaintext = zeroize::Zeroizing::new(open_data(&wire.encrypted_data, &key, &binding.app.private)?);
    Ok(synthetic_inference(&plaintext).to_json_bytes())
}
