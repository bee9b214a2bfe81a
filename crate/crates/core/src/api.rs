//! The gateway's operations as one async interface, so agents, scenarios and
//! the CLI run unchanged against an in-process service or a remote one.

use crate::attestation::AttestationToken;
use crate::network::Challenge;
use crate::wire::*;
use async_trait::async_trait;

#[async_trait]
pub trait TelcoApi: Send + Sync {
    async fn sign(&self, req: SignRequest, token: Option<AttestationToken>) -> Result<SignResponse, ApiError>;

    async fn authenticate(
        &self,
        req: AuthenticateRequest,
        token: Option<AttestationToken>,
    ) -> Result<AuthenticateResponse, ApiError>;

    async fn status(&self, profile_id: &str, token: Option<AttestationToken>) -> Result<StatusResponse, ApiError>;

    async fn provision(&self, req: ProvisionRequest) -> Result<ProvisionResponse, ApiError>;

    async fn lifecycle(&self, req: LifecycleRequest) -> Result<LifecycleResponse, ApiError>;

    async fn revoke(&self, req: RevokeRequest) -> Result<LifecycleResponse, ApiError>;

    async fn update_policy(&self, req: PolicyUpdateRequest) -> Result<PolicyUpdateResponse, ApiError>;

    async fn audit_verify(&self) -> Result<AuditVerifyResponse, ApiError>;

    async fn audit_records(&self, from: u64, limit: usize) -> Result<AuditRecordsResponse, ApiError>;

    async fn network_challenge(&self, imsi: &str) -> Result<Challenge, ApiError>;

    async fn network_confirm(&self, req: ConfirmRequest) -> Result<ConfirmResponse, ApiError>;

    async fn network_resync(&self, req: ResyncRequest) -> Result<(), ApiError>;
}
