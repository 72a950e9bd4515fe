//! Key management service.
//!
//! The KMS owns its own key pair, keeps app registrations, unwraps
//! per-request data keys for function instances and records every decrypt
//! attempt in an append-only audit log. Access policy is allow-by-registration
//! with revocation; [`Kms::decrypt_data_key`] is the single enforcement point.
//!
//! Registration carries the complete app key material. The public half
//! verifies hub signatures and the private half opens the inner layer of the
//! wrapped key, so the KMS can hand `K` back in plaintext over TLS.

pub mod http;
mod store;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::{Millis, SystemClock, TimeSource};
use crate::envelope::{
    kms_unwrap, AppId, AppKeyMaterial, DataKey, EnvelopeError, KmsId, KmsKeyPair, KmsPublicKey,
    WrappedKey,
};

pub use http::{HttpKmsClient, KmsServerHandle};
use store::{KmsStore, StoreEvent};

/// Decrypt latency when the KMS runs next to the FaaS deployment.
pub const CLOUD_KMS_LATENCY_MS: u64 = 206;
/// Decrypt latency when the KMS runs on the hub itself.
pub const HUB_LOCAL_KMS_LATENCY_MS: u64 = 976;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Decision {
    Granted,
    DeniedRevoked,
    DeniedUnregistered,
    DeniedBadSignature,
    DeniedCryptoError,
}

impl Decision {
    pub fn is_granted(self) -> bool {
        matches!(self, Decision::Granted)
    }
}

impl std::str::FromStr for Decision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "Granted" => Decision::Granted,
            "DeniedRevoked" => Decision::DeniedRevoked,
            "DeniedUnregistered" => Decision::DeniedUnregistered,
            "DeniedBadSignature" => Decision::DeniedBadSignature,
            "DeniedCryptoError" => Decision::DeniedCryptoError,
            other => return Err(format!("unknown decision {other:?}")),
        })
    }
}

/// Which layer of the wrapped key failed to open.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CryptoStage {
    Outer,
    Inner,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub seq: u64,
    pub timestamp: Millis,
    pub app_id: String,
    pub request_id: String,
    pub decision: Decision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crypto_stage: Option<CryptoStage>,
    /// SHA-256 of the canonical wrapped-key encoding; the blob itself is not kept.
    pub wrapped_key_sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegistrationStatus {
    Active,
    Revoked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppRegistration {
    pub app_id: AppId,
    pub key_material: AppKeyMaterial,
    pub registered_at: Millis,
    pub status: RegistrationStatus,
    pub generation: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistrationReceipt {
    pub app_id: AppId,
    pub kms_id: KmsId,
    pub registered_at: Millis,
    pub generation: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevocationAck {
    pub app_id: AppId,
    pub revoked_at: Millis,
    /// Audit sequence number of the last record written before the revocation.
    pub after_seq: u64,
}

/// Registration lifecycle marker, positioned relative to the audit log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LifecycleEvent {
    pub after_seq: u64,
    pub app_id: AppId,
    pub kind: RegistrationStatus,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub app_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<Decision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<Millis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<Millis>,
}

impl AuditFilter {
    fn matches(&self, r: &AccessRecord) -> bool {
        self.app_id.as_deref().is_none_or(|a| a == r.app_id)
            && self.decision.is_none_or(|d| d == r.decision)
            && self.from.is_none_or(|f| r.timestamp >= f)
            && self.to.is_none_or(|t| r.timestamp <= t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "error")]
pub enum KmsError {
    #[error("app {app_id} already has an active registration")]
    DuplicateActiveRegistration { app_id: String },
    #[error("unknown app {app_id}")]
    UnknownApp { app_id: String },
    #[error("app {app_id} is not active")]
    NotActive { app_id: String },
    #[error("registered key material is not a valid pair")]
    InconsistentKeyMaterial,
    #[error("access denied: {decision:?}")]
    Denied {
        decision: Decision,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stage: Option<CryptoStage>,
    },
    #[error("malformed time range {from}..{to}")]
    MalformedTimeRange { from: Millis, to: Millis },
    #[error("bad request: {message}")]
    BadRequest { message: String },
    #[error("store failure: {message}")]
    Store { message: String },
    #[error("transport failure: {message}")]
    Transport { message: String },
}

impl KmsError {
    pub fn decision(&self) -> Option<Decision> {
        match self {
            KmsError::Denied { decision, .. } => Some(*decision),
            _ => None,
        }
    }
}

/// Client-side view of a KMS, in-process or remote.
pub trait KmsClient: Send + Sync {
    /// Human-readable location, used in discovery reports.
    fn endpoint(&self) -> String;
    fn get_public_key(&self) -> Result<KmsPublicKey, KmsError>;
    fn register_app(&self, app_id: &AppId, material: &AppKeyMaterial) -> Result<RegistrationReceipt, KmsError>;
    fn decrypt_data_key(&self, app_id: &AppId, request_id: &str, wrapped: &WrappedKey) -> Result<DataKey, KmsError>;
    fn revoke_app(&self, app_id: &AppId) -> Result<RevocationAck, KmsError>;
    fn query_audit(&self, filter: &AuditFilter) -> Result<Vec<AccessRecord>, KmsError>;
    /// Modelled decrypt round-trip latency, charged in virtual time.
    fn response_latency_ms(&self) -> u64;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KmsConfig {
    #[serde(default = "default_listen")]
    pub listen_address: String,
    #[serde(default)]
    pub tls_cert: Option<std::path::PathBuf>,
    #[serde(default)]
    pub tls_key: Option<std::path::PathBuf>,
    #[serde(default = "default_latency")]
    pub simulated_response_latency_ms: u64,
    #[serde(default)]
    pub state_dir: Option<std::path::PathBuf>,
}

fn default_listen() -> String {
    "127.0.0.1:8443".into()
}

fn default_latency() -> u64 {
    CLOUD_KMS_LATENCY_MS
}

impl Default for KmsConfig {
    fn default() -> Self {
        Self {
            listen_address: default_listen(),
            tls_cert: None,
            tls_key: None,
            simulated_response_latency_ms: CLOUD_KMS_LATENCY_MS,
            state_dir: None,
        }
    }
}

impl KmsConfig {
    pub fn with_latency(mut self, ms: u64) -> Self {
        self.simulated_response_latency_ms = ms;
        self
    }
}

struct KmsState {
    registrations: BTreeMap<AppId, AppRegistration>,
    audit: Vec<AccessRecord>,
    lifecycle: Vec<LifecycleEvent>,
    store: KmsStore,
}

impl KmsState {
    fn next_seq(&self) -> u64 {
        self.audit.last().map_or(1, |r| r.seq + 1)
    }

    fn last_seq(&self) -> u64 {
        self.audit.last().map_or(0, |r| r.seq)
    }

    fn apply(&mut self, event: StoreEvent) {
        match event {
            StoreEvent::Registered(reg) => {
                self.lifecycle.push(LifecycleEvent {
                    after_seq: self.last_seq(),
                    app_id: reg.app_id.clone(),
                    kind: RegistrationStatus::Active,
                });
                self.registrations.insert(reg.app_id.clone(), *reg);
            }
            StoreEvent::Revoked { app_id, .. } => {
                self.lifecycle.push(LifecycleEvent {
                    after_seq: self.last_seq(),
                    app_id: app_id.clone(),
                    kind: RegistrationStatus::Revoked,
                });
                if let Some(reg) = self.registrations.get_mut(&app_id) {
                    reg.status = RegistrationStatus::Revoked;
                }
            }
            StoreEvent::Access(rec) => self.audit.push(rec),
        }
    }

    fn commit(&mut self, event: StoreEvent) -> Result<(), KmsError> {
        self.store.append(&event)?;
        self.apply(event);
        Ok(())
    }
}

pub struct Kms {
    keys: KmsKeyPair,
    config: KmsConfig,
    clock: Arc<dyn TimeSource>,
    state: Mutex<KmsState>,
}

impl std::fmt::Debug for Kms {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Kms").field("kms_id", self.keys.kms_id()).finish_non_exhaustive()
    }
}

impl Kms {
    /// A fresh in-memory KMS with a newly generated key pair.
    pub fn in_memory(config: KmsConfig, clock: Arc<dyn TimeSource>) -> Result<Self, KmsError> {
        let keys = KmsKeyPair::generate().map_err(crypto_setup_error)?;
        Ok(Self::from_parts(keys, config, clock, KmsStore::memory(), Vec::new()))
    }

    /// Opens (or initialises) a file-backed KMS under `dir`. The key pair and
    /// the event log survive restarts.
    pub fn open(dir: &Path, config: KmsConfig, clock: Arc<dyn TimeSource>) -> Result<Self, KmsError> {
        let (keys, store, events) = KmsStore::open(dir)?;
        Ok(Self::from_parts(keys, config, clock, store, events))
    }

    /// Uses `state_dir` from the config when present, memory otherwise.
    pub fn from_config(config: KmsConfig) -> Result<Self, KmsError> {
        match config.state_dir.clone() {
            Some(dir) => Self::open(&dir, config, Arc::new(SystemClock)),
            None => Self::in_memory(config, Arc::new(SystemClock)),
        }
    }

    fn from_parts(
        keys: KmsKeyPair,
        config: KmsConfig,
        clock: Arc<dyn TimeSource>,
        store: KmsStore,
        events: Vec<StoreEvent>,
    ) -> Self {
        let mut state = KmsState {
            registrations: BTreeMap::new(),
            audit: Vec::new(),
            lifecycle: Vec::new(),
            store,
        };
        for e in events {
            state.apply(e);
        }
        Self {
            keys,
            config,
            clock,
            state: Mutex::new(state),
        }
    }

    pub fn config(&self) -> &KmsConfig {
        &self.config
    }

    pub fn kms_id(&self) -> &KmsId {
        self.keys.kms_id()
    }

    pub fn get_public_key(&self) -> KmsPublicKey {
        self.keys.public().clone()
    }

    /// Registers an app. Fails while an active registration exists; a revoked
    /// app may register again and gets a new generation.
    pub fn register_app(&self, app_id: &AppId, material: &AppKeyMaterial) -> Result<RegistrationReceipt, KmsError> {
        if !material.is_consistent() {
            return Err(KmsError::InconsistentKeyMaterial);
        }
        let mut st = self.state.lock();
        let generation = match st.registrations.get(app_id) {
            Some(r) if r.status == RegistrationStatus::Active => {
                return Err(KmsError::DuplicateActiveRegistration {
                    app_id: app_id.to_string(),
                })
            }
            Some(r) => r.generation + 1,
            None => 1,
        };
        let reg = AppRegistration {
            app_id: app_id.clone(),
            key_material: material.clone(),
            registered_at: self.clock.now_ms(),
            status: RegistrationStatus::Active,
            generation,
        };
        let receipt = RegistrationReceipt {
            app_id: app_id.clone(),
            kms_id: self.kms_id().clone(),
            registered_at: reg.registered_at,
            generation,
        };
        st.commit(StoreEvent::Registered(Box::new(reg)))?;
        tracing::info!(app = %app_id, generation, "app registered");
        Ok(receipt)
    }

    /// Unwraps a data key under access control. Every call, granted or
    /// denied, appends exactly one audit record.
    pub fn decrypt_data_key(&self, app_id: &AppId, request_id: &str, wrapped: &WrappedKey) -> Result<DataKey, KmsError> {
        let digest = hex::encode(Sha256::digest(wrapped.to_canonical_json().as_bytes()));
        let mut st = self.state.lock();
        let outcome = match st.registrations.get(app_id) {
            None => Err((Decision::DeniedUnregistered, None)),
            Some(r) if r.status == RegistrationStatus::Revoked => Err((Decision::DeniedRevoked, None)),
            Some(r) => kms_unwrap(wrapped, &self.keys, &r.key_material).map_err(|e| match e {
                EnvelopeError::SignatureInvalid => (Decision::DeniedBadSignature, None),
                EnvelopeError::OuterDecryptFailed => (Decision::DeniedCryptoError, Some(CryptoStage::Outer)),
                _ => (Decision::DeniedCryptoError, Some(CryptoStage::Inner)),
            }),
        };
        let (decision, stage) = match &outcome {
            Ok(_) => (Decision::Granted, None),
            Err((d, s)) => (*d, *s),
        };
        let record = AccessRecord {
            seq: st.next_seq(),
            timestamp: self.clock.now_ms(),
            app_id: app_id.to_string(),
            request_id: request_id.to_string(),
            decision,
            crypto_stage: stage,
            wrapped_key_sha256: digest,
        };
        tracing::debug!(seq = record.seq, app = %app_id, ?decision, "decrypt request");
        st.commit(StoreEvent::Access(record))?;
        outcome.map_err(|(decision, stage)| KmsError::Denied { decision, stage })
    }

    pub fn revoke_app(&self, app_id: &AppId) -> Result<RevocationAck, KmsError> {
        let mut st = self.state.lock();
        match st.registrations.get(app_id) {
            None => {
                return Err(KmsError::UnknownApp {
                    app_id: app_id.to_string(),
                })
            }
            Some(r) if r.status != RegistrationStatus::Active => {
                return Err(KmsError::NotActive {
                    app_id: app_id.to_string(),
                })
            }
            Some(_) => {}
        }
        let at = self.clock.now_ms();
        let after_seq = st.last_seq();
        st.commit(StoreEvent::Revoked {
            app_id: app_id.clone(),
            at,
        })?;
        tracing::info!(app = %app_id, "app revoked");
        Ok(RevocationAck {
            app_id: app_id.clone(),
            revoked_at: at,
            after_seq,
        })
    }

    pub fn query_audit(&self, filter: &AuditFilter) -> Result<Vec<AccessRecord>, KmsError> {
        if let (Some(from), Some(to)) = (filter.from, filter.to) {
            if from > to {
                return Err(KmsError::MalformedTimeRange { from, to });
            }
        }
        let st = self.state.lock();
        Ok(st.audit.iter().filter(|r| filter.matches(r)).cloned().collect())
    }

    pub fn audit_len(&self) -> usize {
        self.state.lock().audit.len()
    }

    pub fn lifecycle_events(&self) -> Vec<LifecycleEvent> {
        self.state.lock().lifecycle.clone()
    }

    pub fn registration(&self, app_id: &AppId) -> Option<AppRegistration> {
        self.state.lock().registrations.get(app_id).cloned()
    }
}

fn crypto_setup_error(e: EnvelopeError) -> KmsError {
    KmsError::Store {
        message: format!("key generation failed: {e}"),
    }
}

impl KmsClient for Kms {
    fn endpoint(&self) -> String {
        format!("in-process:{}", self.kms_id())
    }

    fn get_public_key(&self) -> Result<KmsPublicKey, KmsError> {
        Ok(Kms::get_public_key(self))
    }

    fn register_app(&self, app_id: &AppId, material: &AppKeyMaterial) -> Result<RegistrationReceipt, KmsError> {
        Kms::register_app(self, app_id, material)
    }

    fn decrypt_data_key(&self, app_id: &AppId, request_id: &str, wrapped: &WrappedKey) -> Result<DataKey, KmsError> {
        Kms::decrypt_data_key(self, app_id, request_id, wrapped)
    }

    fn revoke_app(&self, app_id: &AppId) -> Result<RevocationAck, KmsError> {
        Kms::revoke_app(self, app_id)
    }

    fn query_audit(&self, filter: &AuditFilter) -> Result<Vec<AccessRecord>, KmsError> {
        Kms::query_audit(self, filter)
    }

    fn response_latency_ms(&self) -> u64 {
        self.config.simulated_response_latency_ms
    }
}

impl<T: KmsClient + ?Sized> KmsClient for Arc<T> {
    fn endpoint(&self) -> String {
        (**self).endpoint()
    }
    fn get_public_key(&self) -> Result<KmsPublicKey, KmsError> {
        (**self).get_public_key()
    }
    fn register_app(&self, app_id: &AppId, material: &AppKeyMaterial) -> Result<RegistrationReceipt, KmsError> {
        (**self).register_app(app_id, material)
    }
    fn decrypt_data_key(&self, app_id: &AppId, request_id: &str, wrapped: &WrappedKey) -> Result<DataKey, KmsError> {
        (**self).decrypt_data_key(app_id, request_id, wrapped)
    }
    fn revoke_app(&self, app_id: &AppId) -> Result<RevocationAck, KmsError> {
        (**self).revoke_app(app_id)
    }
    fn query_audit(&self, filter: &AuditFilter) -> Result<Vec<AccessRecord>, KmsError> {
        (**self).query_audit(filter)
    }
    fn response_latency_ms(&self) -> u64 {
        (**self).response_latency_ms()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualClock;
    use crate::envelope::{generate_app_keypair, generate_data_key, wrap_data_key, AppKeyPair};

    fn kms() -> (Kms, VirtualClock) {
        let clock = VirtualClock::new(0);
        (Kms::in_memory(KmsConfig::default(), Arc::new(clock.clone())).unwrap(), clock)
    }

    fn app(name: &str) -> AppKeyPair {
        generate_app_keypair(&AppId::new(name).unwrap()).unwrap()
    }

    fn wrapped_for(app: &AppKeyPair, kms: &Kms) -> (DataKey, WrappedKey) {
        let k = generate_data_key().unwrap();
        let w = wrap_data_key(&k, app, &kms.get_public_key()).unwrap();
        (k, w)
    }

    #[test]
    fn public_key_stable_within_instance_and_fresh_across() {
        let (a, _) = kms();
        let (b, _) = kms();
        assert_eq!(a.get_public_key(), a.get_public_key());
        assert_ne!(a.get_public_key(), b.get_public_key());
    }

    #[test]
    fn happy_path_grants_and_logs_once() {
        let (kms, _) = kms();
        let a = app("cam");
        kms.register_app(&a.app_id, &a.material()).unwrap();
        let (k, w) = wrapped_for(&a, &kms);
        assert_eq!(kms.decrypt_data_key(&a.app_id, "r1", &w).unwrap(), k);
        let log = kms.query_audit(&AuditFilter::default()).unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].decision, Decision::Granted);
        assert_eq!(log[0].seq, 1);
    }

    #[test]
    fn duplicate_registration_rejected_until_revoked() {
        let (kms, _) = kms();
        let a = app("cam");
        kms.register_app(&a.app_id, &a.material()).unwrap();
        assert!(matches!(
            kms.register_app(&a.app_id, &a.material()),
            Err(KmsError::DuplicateActiveRegistration { .. })
        ));
        kms.revoke_app(&a.app_id).unwrap();
        let receipt = kms.register_app(&a.app_id, &a.material()).unwrap();
        assert_eq!(receipt.generation, 2);
    }

    #[test]
    fn inconsistent_material_rejected() {
        let (kms, _) = kms();
        let a = app("cam");
        let mut m = a.material();
        m.private = app("other").private;
        assert_eq!(kms.register_app(&a.app_id, &m), Err(KmsError::InconsistentKeyMaterial));
    }

    #[test]
    fn denials_are_distinct_and_logged() {
        let (kms, _) = kms();
        let a = app("cam");
        let stranger = app("stranger");
        let (_, w) = wrapped_for(&stranger, &kms);
        let err = kms.decrypt_data_key(&stranger.app_id, "r0", &w).unwrap_err();
        assert_eq!(err.decision(), Some(Decision::DeniedUnregistered));

        kms.register_app(&a.app_id, &a.material()).unwrap();
        // blob for another KMS
        let (other, _) = self::kms();
        let k = generate_data_key().unwrap();
        let foreign = wrap_data_key(&k, &a, &other.get_public_key()).unwrap();
        assert_eq!(
            kms.decrypt_data_key(&a.app_id, "r1", &foreign).unwrap_err(),
            KmsError::Denied {
                decision: Decision::DeniedCryptoError,
                stage: Some(CryptoStage::Outer)
            }
        );

        // signed by someone else under our app id
        let forged_signer = AppKeyPair {
            app_id: a.app_id.clone(),
            ..app("mallory")
        };
        let (_, forged) = wrapped_for(&forged_signer, &kms);
        assert_eq!(
            kms.decrypt_data_key(&a.app_id, "r2", &forged).unwrap_err().decision(),
            Some(Decision::DeniedBadSignature)
        );

        kms.revoke_app(&a.app_id).unwrap();
        let (_, w) = wrapped_for(&a, &kms);
        assert_eq!(
            kms.decrypt_data_key(&a.app_id, "r3", &w).unwrap_err().decision(),
            Some(Decision::DeniedRevoked)
        );
        assert_eq!(kms.audit_len(), 4);
    }

    #[test]
    fn revoke_unknown_or_twice_fails() {
        let (kms, _) = kms();
        assert!(matches!(kms.revoke_app(&AppId::new("x").unwrap()), Err(KmsError::UnknownApp { .. })));
        let a = app("cam");
        kms.register_app(&a.app_id, &a.material()).unwrap();
        kms.revoke_app(&a.app_id).unwrap();
        assert!(matches!(kms.revoke_app(&a.app_id), Err(KmsError::NotActive { .. })));
    }

    #[test]
    fn grant_revoke_reregister_trace() {
        let (kms, clock) = kms();
        let a = app("cam");
        kms.register_app(&a.app_id, &a.material()).unwrap();
        let (_, w) = wrapped_for(&a, &kms);
        kms.decrypt_data_key(&a.app_id, "r1", &w).unwrap();
        clock.advance_to(10);
        kms.revoke_app(&a.app_id).unwrap();
        assert!(kms.decrypt_data_key(&a.app_id, "r2", &w).is_err());
        clock.advance_to(20);
        kms.register_app(&a.app_id, &a.material()).unwrap();
        kms.decrypt_data_key(&a.app_id, "r3", &w).unwrap();

        let decisions: Vec<_> = kms
            .query_audit(&AuditFilter::default())
            .unwrap()
            .into_iter()
            .map(|r| r.decision)
            .collect();
        assert_eq!(decisions, vec![Decision::Granted, Decision::DeniedRevoked, Decision::Granted]);

        let revoked = kms
            .query_audit(&AuditFilter {
                decision: Some(Decision::DeniedRevoked),
                ..Default::default()
            })
            .unwrap();
        assert_eq!(revoked.len(), 1);
        assert_eq!(revoked[0].request_id, "r2");
        assert_eq!(revoked[0].timestamp, 10);
    }

    #[test]
    fn audit_filters_combine() {
        let (kms, clock) = kms();
        let a = app("a");
        let b = app("b");
        kms.register_app(&a.app_id, &a.material()).unwrap();
        kms.register_app(&b.app_id, &b.material()).unwrap();
        for t in 0..6u64 {
            clock.advance_to(t * 100);
            let who = if t % 2 == 0 { &a } else { &b };
            let (_, w) = wrapped_for(who, &kms);
            kms.decrypt_data_key(&who.app_id, &format!("r{t}"), &w).unwrap();
        }
        let only_a = kms
            .query_audit(&AuditFilter {
                app_id: Some("a".into()),
                ..Default::default()
            })
            .unwrap();
        assert_eq!(only_a.len(), 3);
        assert!(only_a.iter().all(|r| r.app_id == "a"));
        assert!(only_a.windows(2).all(|w| w[0].seq < w[1].seq));

        let windowed = kms
            .query_audit(&AuditFilter {
                app_id: Some("b".into()),
                from: Some(150),
                to: Some(450),
                ..Default::default()
            })
            .unwrap();
        assert_eq!(windowed.iter().map(|r| r.timestamp).collect::<Vec<_>>(), vec![300]);

        assert_eq!(
            kms.query_audit(&AuditFilter {
                from: Some(5),
                to: Some(1),
                ..Default::default()
            }),
            Err(KmsError::MalformedTimeRange { from: 5, to: 1 })
        );
    }

    #[test]
    fn audit_never_contains_key_bytes() {
        let (kms, _) = kms();
        let a = app("cam");
        kms.register_app(&a.app_id, &a.material()).unwrap();
        let (k, w) = wrapped_for(&a, &kms);
        kms.decrypt_data_key(&a.app_id, "r1", &w).unwrap();
        let log = serde_json::to_string(&kms.query_audit(&AuditFilter::default()).unwrap()).unwrap();
        assert!(!log.contains(&crate::envelope::b64::encode(k.as_bytes())));
        assert!(!log.contains(&hex::encode(k.as_bytes())));
    }

    #[test]
    fn file_store_survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        let clock: Arc<dyn TimeSource> = Arc::new(VirtualClock::new(0));
        let a = app("cam");
        let (id, w) = {
            let kms = Kms::open(dir.path(), KmsConfig::default(), clock.clone()).unwrap();
            kms.register_app(&a.app_id, &a.material()).unwrap();
            let (_, w) = wrapped_for(&a, &kms);
            kms.decrypt_data_key(&a.app_id, "r1", &w).unwrap();
            (kms.kms_id().clone(), w)
        };
        let kms = Kms::open(dir.path(), KmsConfig::default(), clock).unwrap();
        assert_eq!(kms.kms_id(), &id);
        assert_eq!(kms.audit_len(), 1);
        kms.decrypt_data_key(&a.app_id, "r2", &w).unwrap();
        let seqs: Vec<_> = kms
            .query_audit(&AuditFilter::default())
            .unwrap()
            .iter()
            .map(|r| r.seq)
            .collect();
        assert_eq!(seqs, vec![1, 2]);
    }
}
