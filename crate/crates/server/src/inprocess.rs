use agent_esim_core::attestation::{AttestationToken, Presented};
use agent_esim_core::network::Challenge;
use agent_esim_core::wire::*;
use agent_esim_core::{IdentityService, TelcoApi};
use async_trait::async_trait;
use std::net::{IpAddr, Ipv4Addr};
use std::sync::Arc;

/// Calls the service directly, as if from `source`. Each call runs on the
/// blocking pool, exactly as the HTTP handlers do.
#[derive(Clone)]
pub struct InProcess {
    svc: Arc<IdentityService>,
    source: IpAddr,
}

impl InProcess {
    pub fn new(svc: Arc<IdentityService>) -> Self {
        Self {
            svc,
            source: IpAddr::V4(Ipv4Addr::LOCALHOST),
        }
    }

    pub fn with_source(mut self, source: IpAddr) -> Self {
        self.source = source;
        self
    }

    pub fn service(&self) -> &Arc<IdentityService> {
        &self.svc
    }

    async fn run<T, F>(&self, f: F) -> Result<T, ApiError>
    where
        F: FnOnce(&IdentityService, IpAddr) -> Result<T, ApiError> + Send + 'static,
        T: Send + 'static,
    {
        let svc = self.svc.clone();
        let source = self.source;
        tokio::task::spawn_blocking(move || f(&svc, source))
            .await
            .map_err(|e| ApiError::Unavailable {
                message: format!("worker failed: {e}"),
            })?
    }
}

#[async_trait]
impl TelcoApi for InProcess {
    async fn sign(&self, req: SignRequest, token: Option<AttestationToken>) -> Result<SignResponse, ApiError> {
        self.run(move |s, src| s.handle_sign(&req, &Presented::from(token), src)).await
    }

    async fn authenticate(
        &self,
        req: AuthenticateRequest,
        token: Option<AttestationToken>,
    ) -> Result<AuthenticateResponse, ApiError> {
        self.run(move |s, src| s.handle_authenticate(&req, &Presented::from(token), src)).await
    }

    async fn status(&self, profile_id: &str, token: Option<AttestationToken>) -> Result<StatusResponse, ApiError> {
        let id = profile_id.to_owned();
        self.run(move |s, src| s.handle_status(&id, &Presented::from(token), src)).await
    }

    async fn provision(&self, req: ProvisionRequest) -> Result<ProvisionResponse, ApiError> {
        self.run(move |s, _| s.provision(&req)).await
    }

    async fn lifecycle(&self, req: LifecycleRequest) -> Result<LifecycleResponse, ApiError> {
        self.run(move |s, _| s.lifecycle(&req)).await
    }

    async fn revoke(&self, req: RevokeRequest) -> Result<LifecycleResponse, ApiError> {
        self.run(move |s, _| s.revoke_profile(&req)).await
    }

    async fn update_policy(&self, req: PolicyUpdateRequest) -> Result<PolicyUpdateResponse, ApiError> {
        self.run(move |s, _| s.update_policy(&req)).await
    }

    async fn audit_verify(&self) -> Result<AuditVerifyResponse, ApiError> {
        self.run(|s, _| Ok(s.audit_verify())).await
    }

    async fn audit_records(&self, from: u64, limit: usize) -> Result<AuditRecordsResponse, ApiError> {
        self.run(move |s, _| Ok(s.audit_records(from, limit))).await
    }

    async fn network_challenge(&self, imsi: &str) -> Result<Challenge, ApiError> {
        let imsi = imsi.to_owned();
        self.run(move |s, _| s.network_challenge(&imsi)).await
    }

    async fn network_confirm(&self, req: ConfirmRequest) -> Result<ConfirmResponse, ApiError> {
        self.run(move |s, _| s.network_confirm(&req)).await
    }

    async fn network_resync(&self, req: ResyncRequest) -> Result<(), ApiError> {
        self.run(move |s, _| s.network_resync(&req)).await
    }
}
