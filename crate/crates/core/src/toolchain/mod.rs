//! App provisioning and deployment: KMS discovery, key generation and
//! registration, packaging, and deployment to the FaaS platform.

pub mod keystore;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use keystore::HubKeyStore;

use crate::clock::Millis;
use crate::envelope::{generate_app_keypair, AppId, AppKeyPair, AppPrivateKey, EnvelopeError, KmsId, KmsPublicKey};
use crate::faas_sim::{
    builtin_natives, default_catalog, max_memory_gb, min_memory_gb, BehaviorRef, FaasEndpoint, FaasError, FunctionId,
    FunctionPackage, KmsIdentity,
};
use crate::kms::{KmsClient, KmsError, RegistrationReceipt};

#[derive(Debug, Error)]
pub enum ToolchainError {
    #[error("no KMS reachable: {}", .0.join("; "))]
    NoKmsReachable(Vec<String>),
    #[error("no endpoints given")]
    NoEndpoints,
    #[error("unknown behavior {0}")]
    UnknownBehavior(String),
    #[error("memory {0} GB outside the allowed range")]
    MemoryOutOfRange(Decimal),
    #[error("app {0} is not provisioned")]
    NotProvisioned(String),
    #[error("key store: {0}")]
    KeyStore(String),
    #[error(transparent)]
    Kms(#[from] KmsError),
    #[error(transparent)]
    Faas(#[from] FaasError),
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscoveredKms {
    pub endpoint: String,
    pub kms_id: KmsId,
    pub public_key: KmsPublicKey,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Discovery {
    pub found: Vec<DiscoveredKms>,
    /// One entry per unreachable endpoint.
    pub warnings: Vec<String>,
}

/// Fetches each KMS public key. Unreachable endpoints become warnings; it
/// is an error only if none answers.
pub fn discover_kms(clients: &[Arc<dyn KmsClient>]) -> Result<Discovery, ToolchainError> {
    if clients.is_empty() {
        return Err(ToolchainError::NoEndpoints);
    }
    let mut d = Discovery::default();
    for c in clients {
        match c.get_public_key() {
            Ok(pk) => d.found.push(DiscoveredKms {
                endpoint: c.endpoint(),
                kms_id: pk.kms_id.clone(),
                public_key: pk,
            }),
            Err(e) => {
                tracing::warn!(endpoint = %c.endpoint(), "KMS unreachable: {e}");
                d.warnings.push(format!("{}: {e}", c.endpoint()));
            }
        }
    }
    if d.found.is_empty() {
        return Err(ToolchainError::NoKmsReachable(d.warnings));
    }
    Ok(d)
}

/// Non-secret record of a provisioned app, kept next to the key store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvisionRecord {
    pub app_id: AppId,
    pub kms: DiscoveredKms,
    pub registration: RegistrationReceipt,
}

/// Generates the app key pair, registers it with `kms` and stores the full
/// pair in the hub key store. Fails if the KMS already has the app.
pub fn provision_app(
    app_id: &AppId,
    kms: &dyn KmsClient,
    store: &mut HubKeyStore,
) -> Result<(AppKeyPair, ProvisionRecord), ToolchainError> {
    let public_key = kms.get_public_key()?;
    let pair = generate_app_keypair(app_id)?;
    let registration = kms.register_app(app_id, &pair.material())?;
    store.put(&pair)?;
    let record = ProvisionRecord {
        app_id: app_id.clone(),
        kms: DiscoveredKms {
            endpoint: kms.endpoint(),
            kms_id: public_key.kms_id.clone(),
            public_key,
        },
        registration,
    };
    Ok((pair, record))
}

pub fn is_known_behavior(behavior: &BehaviorRef) -> bool {
    match behavior {
        BehaviorRef::Profile(name) => default_catalog().contains_key(name),
        BehaviorRef::Native(name) => builtin_natives().iter().any(|(n, _)| n == name),
    }
}

/// Builds the deployable package. Identical inputs give identical bytes.
pub fn package_app(
    app_id: &AppId,
    behavior: BehaviorRef,
    kms: KmsIdentity,
    app_private_key: &AppPrivateKey,
    memory_gb: Decimal,
) -> Result<FunctionPackage, ToolchainError> {
    if !is_known_behavior(&behavior) {
        return Err(ToolchainError::UnknownBehavior(behavior.to_string()));
    }
    if memory_gb < min_memory_gb() || memory_gb > max_memory_gb() {
        return Err(ToolchainError::MemoryOutOfRange(memory_gb));
    }
    let package = FunctionPackage {
        function_id: FunctionId::for_app(app_id),
        app_id: app_id.clone(),
        app_function: behavior,
        kms_identity: kms,
        app_private_key: app_private_key.clone(),
        memory_gb,
    };
    package.validate()?;
    Ok(package)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeploymentReceipt {
    pub app_id: AppId,
    pub function_id: FunctionId,
    pub kms_id: KmsId,
    pub faas_endpoint: String,
    pub deployed_at: Millis,
    pub package_digest: String,
}

/// Deploys `package` and, when `state_dir` is given, persists the receipt.
pub fn deploy_app(
    package: &FunctionPackage,
    faas: &dyn FaasEndpoint,
    state_dir: Option<&Path>,
    deployed_at: Millis,
) -> Result<DeploymentReceipt, ToolchainError> {
    let function_id = faas.deploy(package)?;
    let receipt = DeploymentReceipt {
        app_id: package.app_id.clone(),
        function_id,
        kms_id: package.kms_identity.kms_id.clone(),
        faas_endpoint: faas.endpoint(),
        deployed_at,
        package_digest: package.digest(),
    };
    if let Some(dir) = state_dir {
        write_json(&receipt_path(dir, &receipt.app_id), &receipt)?;
    }
    Ok(receipt)
}

/// Layout of the toolchain state directory.
pub fn keystore_path(state_dir: &Path) -> PathBuf {
    state_dir.join("hub_keys.json")
}

pub fn provision_path(state_dir: &Path, app_id: &AppId) -> PathBuf {
    state_dir.join("apps").join(format!("{}.json", app_id.as_str()))
}

pub fn receipt_path(state_dir: &Path, app_id: &AppId) -> PathBuf {
    state_dir.join("receipts").join(format!("{}.json", app_id.as_str()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ToolchainError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ToolchainError> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}
