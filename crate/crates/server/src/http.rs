use agent_esim_core::attestation::Presented;
use agent_esim_core::clock::Clock;
use agent_esim_core::config::Config;
use agent_esim_core::service::ServiceError;
use agent_esim_core::wire::*;
use agent_esim_core::IdentityService;
use axum::extract::rejection::JsonRejection;
use axum::extract::{ConnectInfo, Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use std::net::SocketAddr;
use std::sync::Arc;
use subtle::ConstantTimeEq;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

#[derive(Clone)]
struct AppState {
    svc: Arc<IdentityService>,
    admin_credential: Arc<str>,
}

struct Failure(ApiError);

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.status_code()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let retry = self.0.denial().and_then(|d| d.retry_after_secs);
        let mut resp = (status, Json(self.0)).into_response();
        if let Some(secs) = retry {
            resp.headers_mut().insert(header::RETRY_AFTER, HeaderValue::from(secs));
        }
        resp
    }
}

type Reply<T> = Result<Json<T>, Failure>;

/// Service calls take per-profile locks and fsync, so they leave the reactor.
async fn blocking<T, F>(f: F) -> Result<T, Failure>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| {
            Failure(ApiError::Unavailable {
                message: format!("worker failed: {e}"),
            })
        })?
        .map_err(Failure)
}

fn presented(headers: &HeaderMap) -> Presented {
    match headers.get(ATTESTATION_HEADER) {
        None => Presented::Absent,
        Some(v) => Presented::from_header(Some(v.to_str().unwrap_or("\u{0}"))),
    }
}

fn body<T>(st: &AppState, what: &str, body: Result<Json<T>, JsonRejection>) -> Result<T, Failure> {
    body.map(|Json(b)| b)
        .map_err(|e| Failure(st.svc.refuse(what, ApiError::bad_request(e.body_text()))))
}

fn admin(st: &AppState, headers: &HeaderMap, what: &str) -> Result<(), Failure> {
    let presented = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .unwrap_or("");
    if bool::from(presented.as_bytes().ct_eq(st.admin_credential.as_bytes())) {
        Ok(())
    } else {
        tracing::warn!(what, "admin request with bad credential");
        Err(Failure(st.svc.refuse(what, ApiError::Unauthorized)))
    }
}

async fn sign(
    State(st): State<AppState>,
    ConnectInfo(peer): ConnectInfo<SocketAddr>,
    headers: HeaderMap,
    req: Result<Json<SignRequest>, JsonRejection>,
) -> Reply<SignResponse> {
    let req = body(&st, "/identity/sign", req)?;
    let token = presented(&headers);
    let svc = st.svc.clone();
    blocking(move || svc.handle_sign(&req, &token, peer.ip())).await.map(Json)
}

async fn authenticate(
    State(st): State<AppState>,
    ConnectInfo(peer): ConnectInfo<SocketAddr>,
    headers: HeaderMap,
    req: Result<Json<AuthenticateRequest>, JsonRejection>,
) -> Reply<AuthenticateResponse> {
    let req = body(&st, "/identity/authenticate", req)?;
    let token = presented(&headers);
    let svc = st.svc.clone();
    blocking(move || svc.handle_authenticate(&req, &token, peer.ip())).await.map(Json)
}

async fn status(
    State(st): State<AppState>,
    ConnectInfo(peer): ConnectInfo<SocketAddr>,
    headers: HeaderMap,
    Path(profile_id): Path<String>,
) -> Reply<StatusResponse> {
    let token = presented(&headers);
    let svc = st.svc.clone();
    blocking(move || svc.handle_status(&profile_id, &token, peer.ip())).await.map(Json)
}

async fn provision(
    State(st): State<AppState>,
    headers: HeaderMap,
    req: Result<Json<ProvisionRequest>, JsonRejection>,
) -> Reply<ProvisionResponse> {
    admin(&st, &headers, "/admin/provision")?;
    let req = body(&st, "/admin/provision", req)?;
    let svc = st.svc.clone();
    blocking(move || svc.provision(&req)).await.map(Json)
}

async fn revoke(
    State(st): State<AppState>,
    headers: HeaderMap,
    req: Result<Json<RevokeRequest>, JsonRejection>,
) -> Reply<LifecycleResponse> {
    admin(&st, &headers, "/admin/revoke")?;
    let req = body(&st, "/admin/revoke", req)?;
    let svc = st.svc.clone();
    blocking(move || svc.revoke_profile(&req)).await.map(Json)
}

async fn lifecycle(
    State(st): State<AppState>,
    headers: HeaderMap,
    req: Result<Json<LifecycleRequest>, JsonRejection>,
) -> Reply<LifecycleResponse> {
    admin(&st, &headers, "/admin/lifecycle")?;
    let req = body(&st, "/admin/lifecycle", req)?;
    let svc = st.svc.clone();
    blocking(move || svc.lifecycle(&req)).await.map(Json)
}

async fn policy(
    State(st): State<AppState>,
    headers: HeaderMap,
    req: Result<Json<PolicyUpdateRequest>, JsonRejection>,
) -> Reply<PolicyUpdateResponse> {
    admin(&st, &headers, "/admin/policy")?;
    let req = body(&st, "/admin/policy", req)?;
    let svc = st.svc.clone();
    blocking(move || svc.update_policy(&req)).await.map(Json)
}

async fn audit_verify(State(st): State<AppState>, headers: HeaderMap) -> Reply<AuditVerifyResponse> {
    admin(&st, &headers, "/admin/audit/verify")?;
    let svc = st.svc.clone();
    blocking(move || Ok(svc.audit_verify())).await.map(Json)
}

#[derive(Debug, Deserialize)]
struct Page {
    #[serde(default)]
    from: u64,
    #[serde(default = "default_limit")]
    limit: usize,
}

fn default_limit() -> usize {
    1000
}

async fn audit_records(
    State(st): State<AppState>,
    headers: HeaderMap,
    Query(page): Query<Page>,
) -> Reply<AuditRecordsResponse> {
    admin(&st, &headers, "/admin/audit")?;
    let svc = st.svc.clone();
    blocking(move || Ok(svc.audit_records(page.from, page.limit.min(10_000)))).await.map(Json)
}

async fn challenge(
    State(st): State<AppState>,
    headers: HeaderMap,
    req: Result<Json<ChallengeRequest>, JsonRejection>,
) -> Reply<ChallengeResponse> {
    admin(&st, &headers, "/network/challenge")?;
    let req = body(&st, "/network/challenge", req)?;
    let svc = st.svc.clone();
    blocking(move || svc.network_challenge(&req.imsi)).await.map(Json)
}

async fn confirm(
    State(st): State<AppState>,
    headers: HeaderMap,
    req: Result<Json<ConfirmRequest>, JsonRejection>,
) -> Reply<ConfirmResponse> {
    admin(&st, &headers, "/network/confirm")?;
    let req = body(&st, "/network/confirm", req)?;
    let svc = st.svc.clone();
    blocking(move || svc.network_confirm(&req)).await.map(Json)
}

#[derive(Serialize)]
struct Empty {}

async fn resync(
    State(st): State<AppState>,
    headers: HeaderMap,
    req: Result<Json<ResyncRequest>, JsonRejection>,
) -> Reply<Empty> {
    admin(&st, &headers, "/network/resync")?;
    let req = body(&st, "/network/resync", req)?;
    let svc = st.svc.clone();
    blocking(move || svc.network_resync(&req)).await.map(|()| Json(Empty {}))
}

/// All routes. Relying-service calls under `/network` need the admin
/// credential, like every operator endpoint.
pub fn router(svc: Arc<IdentityService>, admin_credential: &str) -> Router {
    let state = AppState {
        svc,
        admin_credential: admin_credential.into(),
    };
    Router::new()
        .route("/identity/sign", post(sign))
        .route("/identity/authenticate", post(authenticate))
        .route("/identity/status/{profile_id}", get(status))
        .route("/admin/provision", post(provision))
        .route("/admin/revoke", post(revoke))
        .route("/admin/lifecycle", post(lifecycle))
        .route("/admin/policy", post(policy))
        .route("/admin/audit/verify", get(audit_verify))
        .route("/admin/audit", get(audit_records))
        .route("/network/challenge", post(challenge))
        .route("/network/confirm", post(confirm))
        .route("/network/resync", post(resync))
        .with_state(state)
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("config key `admin_credential`: missing (set it in the config file or {})", agent_esim_core::config::ADMIN_TOKEN_ENV)]
    MissingCredential,
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        source: std::io::Error,
    },
}

/// A server task bound to a socket. Dropping it leaves the task running;
/// call [`RunningServer::shutdown`] for a graceful stop.
pub struct RunningServer {
    pub addr: SocketAddr,
    pub service: Arc<IdentityService>,
    stop: Option<oneshot::Sender<()>>,
    task: JoinHandle<std::io::Result<()>>,
}

impl RunningServer {
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stops accepting, lets in-flight requests finish, then returns. All
    /// state is already durable, so nothing else needs flushing.
    pub async fn shutdown(mut self) -> std::io::Result<()> {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        self.task.await.unwrap_or_else(|e| Err(std::io::Error::other(e)))
    }
}

/// Serves `svc` on `listen` (port 0 picks a free port).
pub async fn spawn(
    svc: Arc<IdentityService>,
    listen: SocketAddr,
    admin_credential: &str,
) -> Result<RunningServer, ServeError> {
    if admin_credential.is_empty() {
        return Err(ServeError::MissingCredential);
    }
    let listener = TcpListener::bind(listen)
        .await
        .map_err(|source| ServeError::Bind { addr: listen, source })?;
    let addr = listener.local_addr().map_err(|source| ServeError::Bind { addr: listen, source })?;
    let app = router(svc.clone(), admin_credential).into_make_service_with_connect_info::<SocketAddr>();
    let (stop, stopped) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = stopped.await;
            })
            .await
    });
    tracing::info!(%addr, "identity gateway listening");
    Ok(RunningServer {
        addr,
        service: svc,
        stop: Some(stop),
        task,
    })
}

/// Opens the state directory from `config` and serves it.
pub async fn start(config: &Config, clock: Arc<dyn Clock>) -> Result<RunningServer, ServeError> {
    let credential = config.admin_credential.clone().ok_or(ServeError::MissingCredential)?;
    let cfg = config.clone();
    let svc = tokio::task::spawn_blocking(move || IdentityService::open(&cfg, clock))
        .await
        .expect("state loading does not panic")?;
    spawn(Arc::new(svc), config.listen_addr, &credential).await
}
