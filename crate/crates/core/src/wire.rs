//! Request and response bodies of the HTTP/JSON protocol, the error model and
//! the canonical request encoding that audit records commit to.
//!
//! Byte strings travel as lowercase hex. The attestation token travels in the
//! `x-attestation-token` header as base64 of its canonical bytes; admin calls
//! carry `authorization: Bearer <credential>`.

use crate::attestation::AttestationToken;
use crate::aka::Auts;
use crate::audit::{AuditRecord, ChainVerdict};
use crate::digest::{Digest32, Measurement};
use crate::hexfmt;
use crate::ids::{Iccid, Imsi};
use crate::network::{Challenge, NetworkError};
use crate::policy::{DelegationPolicy, Denial};
use crate::vault::{ProfileState, ProfileStatus, VaultError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use thiserror::Error;

pub const ATTESTATION_HEADER: &str = "x-attestation-token";
const REQUEST_DOMAIN: &[u8] = b"agent-esim-req/v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignRequest {
    pub profile_id: String,
    pub payload_digest: Digest32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignResponse {
    pub profile_id: String,
    #[serde(with = "hexfmt")]
    pub signature: [u8; 64],
    #[serde(with = "hexfmt")]
    pub public_key: [u8; 32],
    pub audit_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthenticateRequest {
    pub profile_id: String,
    #[serde(with = "hexfmt")]
    pub rand: [u8; 16],
    #[serde(with = "hexfmt")]
    pub autn: [u8; 16],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum AuthenticateOutcome {
    Success {
        #[serde(with = "hexfmt")]
        res: [u8; 8],
        #[serde(with = "hexfmt")]
        ck: [u8; 16],
        #[serde(with = "hexfmt")]
        ik: [u8; 16],
    },
    SyncFailure {
        #[serde(with = "hexfmt")]
        auts: [u8; 14],
    },
    MacFailure,
}

impl AuthenticateOutcome {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Success { .. } => "success",
            Self::SyncFailure { .. } => "sync_failure",
            Self::MacFailure => "mac_failure",
        }
    }

    pub fn auts(&self) -> Option<Auts> {
        match self {
            Self::SyncFailure { auts } => Auts::from_bytes(auts).ok(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthenticateResponse {
    pub profile_id: String,
    #[serde(flatten)]
    pub outcome: AuthenticateOutcome,
    pub audit_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusResponse {
    #[serde(flatten)]
    pub profile: ProfileStatus,
    /// Active, within policy validity, with at least one expected measurement.
    pub bound: bool,
    pub policy: DelegationPolicy,
    pub rate_headroom: u32,
    pub audit_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvisionRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile_id: Option<String>,
    #[serde(with = "hexfmt")]
    pub agent_public_key: [u8; 32],
    pub expected_measurements: BTreeSet<Measurement>,
    pub enterprise_namespace: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub container_fingerprint: Option<Measurement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deployment_manifest_digest: Option<Measurement>,
    /// Falls back to the configured default policy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_policy: Option<DelegationPolicy>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvisionResponse {
    pub profile_id: String,
    pub imsi: Imsi,
    pub iccid: Iccid,
    #[serde(with = "hexfmt")]
    pub public_key: [u8; 32],
    pub state: ProfileState,
    pub policy_id: String,
    pub audit_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevokeRequest {
    pub profile_id: String,
    #[serde(default)]
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LifecycleAction {
    Suspend,
    Resume,
    Revoke,
}

impl LifecycleAction {
    pub fn target(self) -> ProfileState {
        match self {
            Self::Suspend => ProfileState::Suspended,
            Self::Resume => ProfileState::Active,
            Self::Revoke => ProfileState::Revoked,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LifecycleRequest {
    pub profile_id: String,
    pub action: LifecycleAction,
    #[serde(default)]
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LifecycleResponse {
    pub profile_id: String,
    pub previous_state: ProfileState,
    pub state: ProfileState,
    pub audit_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyUpdateRequest {
    pub profile_id: String,
    pub policy: DelegationPolicy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyUpdateResponse {
    pub profile_id: String,
    pub previous_policy_id: String,
    pub policy_id: String,
    pub audit_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditVerifyResponse {
    #[serde(flatten)]
    pub verdict: ChainVerdict,
    pub records: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_hash: Option<Digest32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecordsResponse {
    pub records: Vec<AuditRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChallengeRequest {
    pub imsi: String,
}

pub type ChallengeResponse = Challenge;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfirmRequest {
    pub challenge_id: String,
    #[serde(with = "hexfmt")]
    pub res: [u8; 8],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfirmResponse {
    pub authenticated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResyncRequest {
    pub imsi: String,
    #[serde(with = "hexfmt")]
    pub rand: [u8; 16],
    #[serde(with = "hexfmt")]
    pub auts: [u8; 14],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Error)]
#[serde(tag = "error", rename_all = "snake_case")]
pub enum ApiError {
    #[error("{0}")]
    Denied(Denial),
    #[error("unknown profile `{profile_id}`")]
    UnknownProfile { profile_id: String },
    #[error("invalid profile: field `{field}`")]
    InvalidProfile { field: String },
    #[error("invalid policy: {message}")]
    InvalidPolicy { message: String },
    #[error("bad request: {message}")]
    BadRequest { message: String },
    #[error("duplicate profile: `{field}` already in use")]
    DuplicateProfile { field: String },
    #[error("illegal lifecycle transition {from} -> {to}")]
    IllegalTransition { from: ProfileState, to: ProfileState },
    #[error("admin credential missing or wrong")]
    Unauthorized,
    #[error("network core: {message}")]
    Network { kind: String, message: String },
    #[error("service unavailable: {message}")]
    Unavailable { message: String },
    /// Client side only: the service could not be reached or spoke nonsense.
    #[error("service unreachable: {message}")]
    Unreachable { message: String },
}

impl ApiError {
    pub fn status_code(&self) -> u16 {
        match self {
            Self::Denied(_) => 403,
            Self::UnknownProfile { .. } => 404,
            Self::InvalidProfile { .. } | Self::InvalidPolicy { .. } | Self::BadRequest { .. } => 400,
            Self::DuplicateProfile { .. } | Self::IllegalTransition { .. } => 409,
            Self::Unauthorized => 401,
            Self::Network { kind, .. } => match kind.as_str() {
                "UnknownSubscriber" | "UnknownChallenge" => 404,
                "ChallengeExpired" => 410,
                "ResyncMacFailure" | "InvalidImsi" | "Malformed" => 400,
                "DuplicateSubscriber" => 409,
                _ => 503,
            },
            Self::Unavailable { .. } | Self::Unreachable { .. } => 503,
        }
    }

    /// Short machine-readable name, used in audit `Error` outcomes.
    pub fn kind(&self) -> String {
        match self {
            Self::Denied(d) => format!("Denied:{}", d.reason),
            Self::UnknownProfile { .. } => "UnknownProfile".into(),
            Self::InvalidProfile { .. } => "InvalidProfile".into(),
            Self::InvalidPolicy { .. } => "InvalidPolicy".into(),
            Self::BadRequest { .. } => "BadRequest".into(),
            Self::DuplicateProfile { .. } => "DuplicateProfile".into(),
            Self::IllegalTransition { .. } => "IllegalTransition".into(),
            Self::Unauthorized => "Unauthorized".into(),
            Self::Network { kind, .. } => kind.clone(),
            Self::Unavailable { .. } => "StorageFailure".into(),
            Self::Unreachable { .. } => "ServiceUnreachable".into(),
        }
    }

    pub fn denial(&self) -> Option<&Denial> {
        match self {
            Self::Denied(d) => Some(d),
            _ => None,
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::BadRequest {
            message: message.into(),
        }
    }
}

impl From<VaultError> for ApiError {
    fn from(e: VaultError) -> Self {
        match e {
            VaultError::UnknownProfile(profile_id) => Self::UnknownProfile { profile_id },
            VaultError::ProfileNotActive(_) => Self::Denied(Denial::new(crate::policy::DenyReason::ProfileState)),
            VaultError::DuplicateProfile(field) => Self::DuplicateProfile { field: field.into() },
            VaultError::InvalidProfile(field) => Self::InvalidProfile { field: field.into() },
            VaultError::IllegalTransition { from, to } => Self::IllegalTransition { from, to },
            VaultError::Malformed(field) => Self::bad_request(format!("malformed field `{field}`")),
            VaultError::Aka(e) => Self::bad_request(e.to_string()),
            VaultError::SqnRegression => Self::bad_request("sequence number may not decrease"),
            VaultError::Storage(message) => Self::Unavailable { message },
        }
    }
}

impl From<NetworkError> for ApiError {
    fn from(e: NetworkError) -> Self {
        let kind = match &e {
            NetworkError::DuplicateSubscriber => "DuplicateSubscriber",
            NetworkError::InvalidImsi => "InvalidImsi",
            NetworkError::UnknownSubscriber => "UnknownSubscriber",
            NetworkError::UnknownChallenge => "UnknownChallenge",
            NetworkError::ChallengeExpired => "ChallengeExpired",
            NetworkError::ResyncMacFailure => "ResyncMacFailure",
            NetworkError::SqnExhausted => "SqnExhausted",
            NetworkError::Malformed(_) => "Malformed",
            NetworkError::Storage(_) => "StorageFailure",
        };
        Self::Network {
            kind: kind.into(),
            message: e.to_string(),
        }
    }
}

/// Canonical request encoding: domain tag, then the operation name and each
/// field as u32 big-endian length-prefixed bytes. An absent attestation token
/// is an empty field.
pub fn request_digest(operation: &str, fields: &[&[u8]]) -> Digest32 {
    let mut h = Sha256::new();
    h.update(REQUEST_DOMAIN);
    for f in std::iter::once(operation.as_bytes()).chain(fields.iter().copied()) {
        h.update((f.len() as u32).to_be_bytes());
        h.update(f);
    }
    Digest32(h.finalize().into())
}

fn token_bytes(token: Option<&AttestationToken>) -> Vec<u8> {
    token.map(AttestationToken::to_bytes).unwrap_or_default()
}

pub fn sign_request_digest(req: &SignRequest, token: Option<&AttestationToken>) -> Digest32 {
    request_digest(
        "Sign",
        &[req.profile_id.as_bytes(), req.payload_digest.as_bytes(), &token_bytes(token)],
    )
}

pub fn authenticate_request_digest(req: &AuthenticateRequest, token: Option<&AttestationToken>) -> Digest32 {
    request_digest(
        "Authenticate",
        &[req.profile_id.as_bytes(), &req.rand, &req.autn, &token_bytes(token)],
    )
}

pub fn status_request_digest(profile_id: &str, token: Option<&AttestationToken>) -> Digest32 {
    request_digest("Status", &[profile_id.as_bytes(), &token_bytes(token)])
}

/// Admin bodies are digested through their JSON form, which is deterministic
/// for these types (declared field order, sorted sets).
pub fn admin_request_digest<T: Serialize>(operation: &str, body: &T) -> Digest32 {
    let json = serde_json::to_vec(body).expect("request body serializes");
    request_digest(operation, &[&json])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::DenyReason;

    #[test]
    fn digest_encoding_is_pinned() {
        let mut bytes = b"agent-esim-req/v1".to_vec();
        for f in [&b"Status"[..], b"p1", b""] {
            bytes.extend_from_slice(&(f.len() as u32).to_be_bytes());
            bytes.extend_from_slice(f);
        }
        assert_eq!(status_request_digest("p1", None), Digest32::of(&bytes));
    }

    #[test]
    fn field_boundaries_matter() {
        assert_ne!(request_digest("x", &[b"ab", b"c"]), request_digest("x", &[b"a", b"bc"]));
    }

    #[test]
    fn errors_roundtrip_through_json() {
        let errs = [
            ApiError::Denied(Denial {
                reason: DenyReason::RateLimit,
                detail: None,
                retry_after_secs: Some(12),
            }),
            ApiError::UnknownProfile { profile_id: "x".into() },
            ApiError::IllegalTransition {
                from: ProfileState::Revoked,
                to: ProfileState::Active,
            },
            ApiError::Unauthorized,
            ApiError::from(NetworkError::ChallengeExpired),
        ];
        for e in errs {
            let json = serde_json::to_string(&e).unwrap();
            assert_eq!(serde_json::from_str::<ApiError>(&json).unwrap(), e, "{json}");
        }
    }

    #[test]
    fn status_mapping() {
        assert_eq!(ApiError::Denied(Denial::new(DenyReason::Attestation)).status_code(), 403);
        assert_eq!(ApiError::from(VaultError::UnknownProfile("p".into())).status_code(), 404);
        assert_eq!(ApiError::from(VaultError::InvalidProfile("imsi")).status_code(), 400);
        assert_eq!(ApiError::InvalidPolicy { message: "x".into() }.status_code(), 400);
        assert_eq!(ApiError::from(VaultError::Storage("x".into())).status_code(), 503);
        assert_eq!(ApiError::Unauthorized.status_code(), 401);
    }

    #[test]
    fn authenticate_outcome_shape() {
        let r = AuthenticateResponse {
            profile_id: "p".into(),
            outcome: AuthenticateOutcome::MacFailure,
            audit_seq: 3,
        };
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["outcome"], "mac_failure");
        assert_eq!(serde_json::from_value::<AuthenticateResponse>(v).unwrap(), r);
    }
}
