//! Local HTTP surface of the emulator, mirroring the invocation wire payload.
//!
//! | method | path                           | body                                              |
//! |--------|--------------------------------|---------------------------------------------------|
//! | POST   | `/v1/functions`                | `FunctionPackage`                                 |
//! | DELETE | `/v1/functions/{id}`           |                                                   |
//! | POST   | `/v1/functions/{id}/invoke`    | `{app_id, request_id, encrypted_data, encrypted_key, at?}` |
//! | POST   | `/v1/functions/{id}/keepalive` | `{at?}`                                           |

use std::net::SocketAddr;
use std::time::Duration;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::service::FaasEndpoint;
use super::{FaasError, FunctionId, FunctionPackage, InvocationRecord, InvocationRequest, PlatformHandle};
use crate::clock::Millis;
use crate::net::{spawn_server, ServerHandle};

#[derive(Debug, Serialize, Deserialize)]
pub struct InvokeBody {
    #[serde(flatten)]
    pub request: InvocationRequest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at: Option<Millis>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct KeepAliveBody {
    #[serde(default)]
    pub at: Option<Millis>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DeployResponse {
    pub function_id: FunctionId,
}

struct ApiError(FaasError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            FaasError::UnknownFunction { .. } => StatusCode::NOT_FOUND,
            FaasError::DuplicateFunction { .. } | FaasError::DuplicateNative { .. } => StatusCode::CONFLICT,
            FaasError::CapacityExhausted { .. } => StatusCode::SERVICE_UNAVAILABLE,
            FaasError::Transport { .. } => StatusCode::BAD_GATEWAY,
            _ => StatusCode::BAD_REQUEST,
        };
        (status, Json(self.0)).into_response()
    }
}

#[derive(Clone)]
struct AppState {
    platform: PlatformHandle,
    real_time: bool,
}

async fn blocking<R: Send + 'static>(
    f: impl FnOnce() -> Result<R, FaasError> + Send + 'static,
) -> Result<R, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(FaasError::Transport { message: e.to_string() }))?
        .map_err(ApiError)
}

async fn pace(s: &AppState, rec: &InvocationRecord) {
    if s.real_time {
        tokio::time::sleep(Duration::from_millis(rec.e2e_ms)).await;
    }
}

async fn deploy(State(s): State<AppState>, Json(pkg): Json<FunctionPackage>) -> Result<Json<DeployResponse>, ApiError> {
    let p = s.platform.clone();
    let function_id = blocking(move || p.deploy(&pkg)).await?;
    Ok(Json(DeployResponse { function_id }))
}

async fn remove(State(s): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    let p = s.platform.clone();
    blocking(move || p.remove(&FunctionId::new(id))).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn invoke(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<InvokeBody>,
) -> Result<Json<InvocationRecord>, ApiError> {
    let p = s.platform.clone();
    let rec = blocking(move || p.invoke(&FunctionId::new(id), &body.request, body.at)).await?;
    pace(&s, &rec).await;
    Ok(Json(rec))
}

async fn keep_alive(
    State(s): State<AppState>,
    Path(id): Path<String>,
    body: Option<Json<KeepAliveBody>>,
) -> Result<Json<InvocationRecord>, ApiError> {
    let p = s.platform.clone();
    let at = body.and_then(|Json(b)| b.at);
    let rec = blocking(move || p.keep_alive(&FunctionId::new(id), at)).await?;
    pace(&s, &rec).await;
    Ok(Json(rec))
}

/// `real_time` delays each response by the invocation's emulated e2e latency.
pub fn router(platform: PlatformHandle, real_time: bool) -> Router {
    Router::new()
        .route("/v1/functions", post(deploy))
        .route("/v1/functions/{id}", delete(remove))
        .route("/v1/functions/{id}/invoke", post(invoke))
        .route("/v1/functions/{id}/keepalive", post(keep_alive))
        .with_state(AppState { platform, real_time })
}

pub fn spawn_faas_server(platform: PlatformHandle, addr: SocketAddr, real_time: bool) -> std::io::Result<ServerHandle> {
    spawn_server(router(platform, real_time), addr, None)
}

/// Blocking HTTP client for the emulator.
pub struct HttpFaasClient {
    base: String,
    client: reqwest::blocking::Client,
}

impl std::fmt::Debug for HttpFaasClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpFaasClient").field("base", &self.base).finish()
    }
}

fn transport(e: impl std::fmt::Display) -> FaasError {
    FaasError::Transport { message: e.to_string() }
}

impl HttpFaasClient {
    pub fn new(base_url: &str) -> Result<Self, FaasError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(transport)?;
        Ok(Self {
            base: base_url.trim_end_matches('/').to_string(),
            client,
        })
    }

    fn send<T: DeserializeOwned>(&self, req: reqwest::blocking::RequestBuilder) -> Result<Option<T>, FaasError> {
        let resp = req.send().map_err(transport)?;
        let status = resp.status();
        let body = resp.bytes().map_err(transport)?;
        if status == reqwest::StatusCode::NO_CONTENT {
            return Ok(None);
        }
        if status.is_success() {
            return serde_json::from_slice(&body).map(Some).map_err(transport);
        }
        Err(serde_json::from_slice::<FaasError>(&body).unwrap_or_else(|_| FaasError::Transport {
            message: format!("HTTP {status}: {}", String::from_utf8_lossy(&body)),
        }))
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, FaasError> {
        self.send(self.client.post(format!("{}{path}", self.base)).json(body))?
            .ok_or_else(|| transport("empty response"))
    }
}

impl FaasEndpoint for HttpFaasClient {
    fn endpoint(&self) -> String {
        self.base.clone()
    }

    fn deploy(&self, package: &FunctionPackage) -> Result<FunctionId, FaasError> {
        let r: DeployResponse = self.post("/v1/functions", package)?;
        Ok(r.function_id)
    }

    fn remove(&self, function_id: &FunctionId) -> Result<(), FaasError> {
        self.send::<serde_json::Value>(self.client.delete(format!("{}/v1/functions/{function_id}", self.base)))?;
        Ok(())
    }

    fn invoke(
        &self,
        function_id: &FunctionId,
        request: &InvocationRequest,
        at: Option<Millis>,
    ) -> Result<InvocationRecord, FaasError> {
        self.post(
            &format!("/v1/functions/{function_id}/invoke"),
            &InvokeBody {
                request: request.clone(),
                at,
            },
        )
    }

    fn keep_alive(&self, function_id: &FunctionId, at: Option<Millis>) -> Result<InvocationRecord, FaasError> {
        self.post(&format!("/v1/functions/{function_id}/keepalive"), &KeepAliveBody { at })
    }
}
