//! HTTP client for the identity gateway. Implements [`TelcoApi`], so code
//! written against the trait runs unchanged against a remote gateway.

use agent_esim_core::attestation::AttestationToken;
use agent_esim_core::network::Challenge;
use agent_esim_core::wire::*;
use agent_esim_core::TelcoApi;
use async_trait::async_trait;
use reqwest::{Method, RequestBuilder};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::sync::{Arc, Mutex};
use std::time::Duration;

/// Every byte the client put on or took off the wire: request bodies,
/// attestation headers and response bodies, in order.
#[derive(Clone, Default)]
pub struct WireTap(Arc<Mutex<Vec<u8>>>);

impl WireTap {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, bytes: &[u8]) {
        let mut buf = self.0.lock().unwrap();
        buf.extend_from_slice(bytes);
        buf.push(b'\n');
    }

    pub fn bytes(&self) -> Vec<u8> {
        self.0.lock().unwrap().clone()
    }

    pub fn len(&self) -> usize {
        self.0.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone)]
pub struct HttpClient {
    base: String,
    http: reqwest::Client,
    admin_credential: Option<String>,
    tap: Option<WireTap>,
}

impl HttpClient {
    pub fn new(base_url: impl Into<String>) -> Self {
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .expect("static client configuration");
        Self {
            base: base_url.into().trim_end_matches('/').to_owned(),
            http,
            admin_credential: None,
            tap: None,
        }
    }

    pub fn with_admin_credential(mut self, credential: impl Into<String>) -> Self {
        self.admin_credential = Some(credential.into());
        self
    }

    pub fn with_tap(mut self, tap: WireTap) -> Self {
        self.tap = Some(tap);
        self
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn request(&self, method: Method, path: &str, admin: bool) -> RequestBuilder {
        let mut rb = self.http.request(method, format!("{}{path}", self.base));
        if admin {
            if let Some(c) = &self.admin_credential {
                rb = rb.bearer_auth(c);
            }
        }
        rb
    }

    async fn send<T: DeserializeOwned>(&self, rb: RequestBuilder, body: Option<Vec<u8>>) -> Result<T, ApiError> {
        let rb = match body {
            Some(b) => {
                if let Some(tap) = &self.tap {
                    tap.push(&b);
                }
                rb.header("content-type", "application/json").body(b)
            }
            None => rb,
        };
        let resp = rb.send().await.map_err(|e| ApiError::Unreachable {
            message: e.to_string(),
        })?;
        let status = resp.status();
        let bytes = resp.bytes().await.map_err(|e| ApiError::Unreachable {
            message: e.to_string(),
        })?;
        if let Some(tap) = &self.tap {
            tap.push(&bytes);
        }
        if status.is_success() {
            serde_json::from_slice(&bytes).map_err(|e| ApiError::Unreachable {
                message: format!("undecodable response: {e}"),
            })
        } else {
            Err(serde_json::from_slice::<ApiError>(&bytes).unwrap_or_else(|_| ApiError::Unreachable {
                message: format!("HTTP {status}: {}", String::from_utf8_lossy(&bytes)),
            }))
        }
    }

    async fn post<B: Serialize, T: DeserializeOwned>(
        &self,
        path: &str,
        body: &B,
        admin: bool,
        token: Option<&AttestationToken>,
    ) -> Result<T, ApiError> {
        let mut rb = self.request(Method::POST, path, admin);
        if let Some(t) = token {
            let header = t.to_header();
            if let Some(tap) = &self.tap {
                tap.push(header.as_bytes());
            }
            rb = rb.header(ATTESTATION_HEADER, header);
        }
        let bytes = serde_json::to_vec(body).expect("request serializes");
        self.send(rb, Some(bytes)).await
    }
}

#[async_trait]
impl TelcoApi for HttpClient {
    async fn sign(&self, req: SignRequest, token: Option<AttestationToken>) -> Result<SignResponse, ApiError> {
        self.post("/identity/sign", &req, false, token.as_ref()).await
    }

    async fn authenticate(
        &self,
        req: AuthenticateRequest,
        token: Option<AttestationToken>,
    ) -> Result<AuthenticateResponse, ApiError> {
        self.post("/identity/authenticate", &req, false, token.as_ref()).await
    }

    async fn status(&self, profile_id: &str, token: Option<AttestationToken>) -> Result<StatusResponse, ApiError> {
        let mut rb = self.request(Method::GET, &format!("/identity/status/{profile_id}"), false);
        if let Some(t) = token {
            rb = rb.header(ATTESTATION_HEADER, t.to_header());
        }
        self.send(rb, None).await
    }

    async fn provision(&self, req: ProvisionRequest) -> Result<ProvisionResponse, ApiError> {
        self.post("/admin/provision", &req, true, None).await
    }

    async fn lifecycle(&self, req: LifecycleRequest) -> Result<LifecycleResponse, ApiError> {
        self.post("/admin/lifecycle", &req, true, None).await
    }

    async fn revoke(&self, req: RevokeRequest) -> Result<LifecycleResponse, ApiError> {
        self.post("/admin/revoke", &req, true, None).await
    }

    async fn update_policy(&self, req: PolicyUpdateRequest) -> Result<PolicyUpdateResponse, ApiError> {
        self.post("/admin/policy", &req, true, None).await
    }

    async fn audit_verify(&self) -> Result<AuditVerifyResponse, ApiError> {
        self.send(self.request(Method::GET, "/admin/audit/verify", true), None).await
    }

    async fn audit_records(&self, from: u64, limit: usize) -> Result<AuditRecordsResponse, ApiError> {
        let path = format!("/admin/audit?from={from}&limit={limit}");
        self.send(self.request(Method::GET, &path, true), None).await
    }

    async fn network_challenge(&self, imsi: &str) -> Result<Challenge, ApiError> {
        let req = ChallengeRequest { imsi: imsi.to_owned() };
        self.post("/network/challenge", &req, true, None).await
    }

    async fn network_confirm(&self, req: ConfirmRequest) -> Result<ConfirmResponse, ApiError> {
        self.post("/network/confirm", &req, true, None).await
    }

    async fn network_resync(&self, req: ResyncRequest) -> Result<(), ApiError> {
        let _: serde_json::Value = self.post("/network/resync", &req, true, None).await?;
        Ok(())
    }
}
