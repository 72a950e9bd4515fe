//! HTTPS REST surface of the KMS and a blocking client for it.
//!
//! | method | path                   | body / query                          |
//! |--------|------------------------|---------------------------------------|
//! | GET    | `/v1/public-key`       |                                       |
//! | POST   | `/v1/apps`             | `{app_id, key_material}`              |
//! | POST   | `/v1/decrypt`          | `{app_id, request_id, wrapped_key}`   |
//! | POST   | `/v1/apps/{id}/revoke` |                                       |
//! | GET    | `/v1/audit`            | `?app_id=&decision=&from=&to=`        |
//!
//! Errors are returned as the JSON encoding of [`KmsError`].

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{AccessRecord, AuditFilter, Kms, KmsClient, KmsError, RegistrationReceipt, RevocationAck};
use crate::envelope::{b64, AppId, AppKeyMaterial, DataKey, KmsPublicKey, WrappedKey};
use crate::net::{spawn_server, ServerHandle};
use crate::tls::TlsMaterial;

pub type KmsServerHandle = ServerHandle;

#[derive(Debug, Serialize, Deserialize)]
pub struct RegisterRequest {
    pub app_id: AppId,
    pub key_material: AppKeyMaterial,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DecryptRequest {
    pub app_id: AppId,
    pub request_id: String,
    pub wrapped_key: WrappedKey,
}

#[derive(Serialize, Deserialize)]
pub struct DecryptResponse {
    pub data_key: String,
}

#[derive(Debug, Default, Deserialize)]
struct AuditQuery {
    app_id: Option<String>,
    decision: Option<String>,
    from: Option<u64>,
    to: Option<u64>,
}

struct ApiError(KmsError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            KmsError::DuplicateActiveRegistration { .. } | KmsError::NotActive { .. } => StatusCode::CONFLICT,
            KmsError::UnknownApp { .. } => StatusCode::NOT_FOUND,
            KmsError::Denied { .. } => StatusCode::FORBIDDEN,
            KmsError::MalformedTimeRange { .. } | KmsError::BadRequest { .. } | KmsError::InconsistentKeyMaterial => {
                StatusCode::BAD_REQUEST
            }
            KmsError::Store { .. } | KmsError::Transport { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(self.0)).into_response()
    }
}

impl From<KmsError> for ApiError {
    fn from(e: KmsError) -> Self {
        Self(e)
    }
}

#[derive(Clone)]
struct AppState {
    kms: Arc<Kms>,
    latency: Duration,
}

async fn public_key(State(s): State<AppState>) -> Json<KmsPublicKey> {
    Json(Kms::get_public_key(&s.kms))
}

async fn register(State(s): State<AppState>, Json(req): Json<RegisterRequest>) -> Result<Json<RegistrationReceipt>, ApiError> {
    Ok(Json(Kms::register_app(&s.kms, &req.app_id, &req.key_material)?))
}

async fn decrypt(State(s): State<AppState>, Json(req): Json<DecryptRequest>) -> Result<Json<DecryptResponse>, ApiError> {
    if !s.latency.is_zero() {
        tokio::time::sleep(s.latency).await;
    }
    let key = Kms::decrypt_data_key(&s.kms, &req.app_id, &req.request_id, &req.wrapped_key)?;
    Ok(Json(DecryptResponse {
        data_key: b64::encode(key.as_bytes()),
    }))
}

async fn revoke(State(s): State<AppState>, Path(id): Path<String>) -> Result<Json<RevocationAck>, ApiError> {
    let app_id = AppId::new(id).map_err(|e| KmsError::BadRequest { message: e.to_string() })?;
    Ok(Json(Kms::revoke_app(&s.kms, &app_id)?))
}

async fn audit(State(s): State<AppState>, Query(q): Query<AuditQuery>) -> Result<Json<Vec<AccessRecord>>, ApiError> {
    let decision = q
        .decision
        .as_deref()
        .filter(|d| !d.is_empty())
        .map(str::parse)
        .transpose()
        .map_err(|message| KmsError::BadRequest { message })?;
    let filter = AuditFilter {
        app_id: q.app_id.filter(|a| !a.is_empty()),
        decision,
        from: q.from,
        to: q.to,
    };
    Ok(Json(Kms::query_audit(&s.kms, &filter)?))
}

/// Router for the KMS API; `latency` delays every decrypt response.
pub fn router(kms: Arc<Kms>, latency: Duration) -> Router {
    Router::new()
        .route("/v1/public-key", get(public_key))
        .route("/v1/apps", post(register))
        .route("/v1/decrypt", post(decrypt))
        .route("/v1/apps/{id}/revoke", post(revoke))
        .route("/v1/audit", get(audit))
        .with_state(AppState { kms, latency })
}

/// Starts the HTTPS KMS in the background, delaying decrypt responses by
/// the configured simulated latency.
pub fn spawn_kms_server(kms: Arc<Kms>, addr: SocketAddr, tls: &TlsMaterial) -> std::io::Result<KmsServerHandle> {
    let latency = Duration::from_millis(kms.config().simulated_response_latency_ms);
    spawn_server(router(kms, latency), addr, Some(tls))
}

/// Same as [`spawn_kms_server`] with an explicit real-time delay (tests use 0).
pub fn spawn_kms_server_with_delay(
    kms: Arc<Kms>,
    addr: SocketAddr,
    tls: &TlsMaterial,
    delay: Duration,
) -> std::io::Result<KmsServerHandle> {
    spawn_server(router(kms, delay), addr, Some(tls))
}

/// Blocking HTTPS client. Must not be used from inside an async runtime.
pub struct HttpKmsClient {
    base: String,
    client: reqwest::blocking::Client,
    latency_hint_ms: u64,
}

impl std::fmt::Debug for HttpKmsClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpKmsClient").field("base", &self.base).finish()
    }
}

fn transport(e: impl std::fmt::Display) -> KmsError {
    KmsError::Transport { message: e.to_string() }
}

impl HttpKmsClient {
    /// `ca_pem` is an extra trusted root (the KMS self-signed certificate).
    pub fn new(base_url: &str, ca_pem: Option<&str>) -> Result<Self, KmsError> {
        let mut builder = reqwest::blocking::Client::builder()
            .use_rustls_tls()
            .min_tls_version(reqwest::tls::Version::TLS_1_2)
            .timeout(Duration::from_secs(30));
        if let Some(pem) = ca_pem {
            builder = builder.add_root_certificate(reqwest::Certificate::from_pem(pem.as_bytes()).map_err(transport)?);
        }
        Ok(Self {
            base: base_url.trim_end_matches('/').to_string(),
            client: builder.build().map_err(transport)?,
            latency_hint_ms: super::CLOUD_KMS_LATENCY_MS,
        })
    }

    pub fn with_latency_hint(mut self, ms: u64) -> Self {
        self.latency_hint_ms = ms;
        self
    }

    fn read<T: DeserializeOwned>(resp: reqwest::blocking::Response) -> Result<T, KmsError> {
        let status = resp.status();
        let body = resp.bytes().map_err(transport)?;
        if status.is_success() {
            return serde_json::from_slice(&body).map_err(transport);
        }
        Err(serde_json::from_slice::<KmsError>(&body).unwrap_or_else(|_| KmsError::Transport {
            message: format!("HTTP {status}: {}", String::from_utf8_lossy(&body)),
        }))
    }

    fn get<T: DeserializeOwned>(&self, path: &str, query: &[(&str, String)]) -> Result<T, KmsError> {
        let resp = self
            .client
            .get(format!("{}{path}", self.base))
            .query(query)
            .send()
            .map_err(transport)?;
        Self::read(resp)
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, KmsError> {
        let resp = self
            .client
            .post(format!("{}{path}", self.base))
            .json(body)
            .send()
            .map_err(transport)?;
        Self::read(resp)
    }
}

impl KmsClient for HttpKmsClient {
    fn endpoint(&self) -> String {
        self.base.clone()
    }

    fn get_public_key(&self) -> Result<KmsPublicKey, KmsError> {
        self.get("/v1/public-key", &[])
    }

    fn register_app(&self, app_id: &AppId, material: &AppKeyMaterial) -> Result<RegistrationReceipt, KmsError> {
        self.post(
            "/v1/apps",
            &RegisterRequest {
                app_id: app_id.clone(),
                key_material: material.clone(),
            },
        )
    }

    fn decrypt_data_key(&self, app_id: &AppId, request_id: &str, wrapped: &WrappedKey) -> Result<DataKey, KmsError> {
        let resp: DecryptResponse = self.post(
            "/v1/decrypt",
            &DecryptRequest {
                app_id: app_id.clone(),
                request_id: request_id.to_string(),
                wrapped_key: wrapped.clone(),
            },
        )?;
        let bytes = zeroize::Zeroizing::new(b64::decode(&resp.data_key).map_err(transport)?);
        DataKey::from_bytes(&bytes).map_err(transport)
    }

    fn revoke_app(&self, app_id: &AppId) -> Result<RevocationAck, KmsError> {
        self.post(&format!("/v1/apps/{}/revoke", app_id.as_str()), &serde_json::json!({}))
    }

    fn query_audit(&self, filter: &AuditFilter) -> Result<Vec<AccessRecord>, KmsError> {
        let mut q = Vec::new();
        if let Some(a) = &filter.app_id {
            q.push(("app_id", a.clone()));
        }
        if let Some(d) = filter.decision {
            q.push(("decision", format!("{d:?}")));
        }
        if let Some(f) = filter.from {
            q.push(("from", f.to_string()));
        }
        if let Some(t) = filter.to {
            q.push(("to", t.to_string()));
        }
        self.get("/v1/audit", &q)
    }

    fn response_latency_ms(&self) -> u64 {
        self.latency_hint_ms
    }
}
