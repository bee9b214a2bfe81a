//! Agent-side flows: AKA authentication through a relying service, signed
//! inter-agent messages and their verification.

use crate::tee::EmulatedTee;
use agent_esim_core::attestation::AttestationToken;
use agent_esim_core::clock::Clock;
use agent_esim_core::digest::{Digest32, Measurement};
use agent_esim_core::hexfmt;
use agent_esim_core::network::Challenge;
use agent_esim_core::policy::Denial;
use agent_esim_core::vault::{verify_profile_signature, ProfileState};
use agent_esim_core::wire::*;
use agent_esim_core::TelcoApi;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

/// Lifetime of the tokens agents attach to each request.
pub const TOKEN_TTL_SECS: u64 = 120;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("gateway {0}")]
    DeniedByGateway(Denial),
    #[error("vault rejected the network challenge (MAC failure)")]
    AuthFailed,
    #[error("still out of sync after one resynchronisation round")]
    ResyncExhausted,
    #[error(transparent)]
    Api(ApiError),
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("scenario config: {0}")]
    Config(String),
    #[error("gateway setup: {0}")]
    Setup(String),
}

impl From<ApiError> for HarnessError {
    fn from(e: ApiError) -> Self {
        match e {
            ApiError::Denied(d) => Self::DeniedByGateway(d),
            other => Self::Api(other),
        }
    }
}

impl HarnessError {
    pub fn denial(&self) -> Option<&Denial> {
        match self {
            Self::DeniedByGateway(d) => Some(d),
            _ => None,
        }
    }
}

/// One hop of a flow. Hops that reach the gateway carry the digest of the
/// request, which must match an audit record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptStep {
    pub hop: String,
    pub outcome: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_digest: Option<Digest32>,
}

/// An agent process: its identity references and its (emulated) execution
/// environment. It never holds subscriber keys or the profile signing key.
pub struct AgentRuntime {
    pub agent_id: String,
    pub profile_id: String,
    pub imsi: String,
    pub measurement: Measurement,
    pub environment_id: String,
    tee: Arc<EmulatedTee>,
    api: Arc<dyn TelcoApi>,
    clock: Arc<dyn Clock>,
    pub transcript: Vec<TranscriptStep>,
}

impl AgentRuntime {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        agent_id: impl Into<String>,
        profile_id: impl Into<String>,
        imsi: impl Into<String>,
        measurement: Measurement,
        environment_id: impl Into<String>,
        tee: Arc<EmulatedTee>,
        api: Arc<dyn TelcoApi>,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Self {
            agent_id: agent_id.into(),
            profile_id: profile_id.into(),
            imsi: imsi.into(),
            measurement,
            environment_id: environment_id.into(),
            tee,
            api,
            clock,
            transcript: Vec::new(),
        }
    }

    /// A fresh token carrying exactly this runtime's measurement and environment.
    pub fn attest(&self) -> AttestationToken {
        self.tee
            .attest(self.measurement, &self.environment_id, self.clock.now(), TOKEN_TTL_SECS)
    }

    /// The runtime starts executing different code.
    pub fn swap_code(&mut self, code: &[u8]) {
        self.measurement = Measurement::of(code);
    }

    pub fn api(&self) -> &Arc<dyn TelcoApi> {
        &self.api
    }

    fn log(&mut self, hop: impl Into<String>, outcome: impl Into<String>, digest: Option<Digest32>) {
        self.transcript.push(TranscriptStep {
            hop: hop.into(),
            outcome: outcome.into(),
            request_digest: digest,
        });
    }

    /// Everything this agent process holds, serialised, for key-isolation scans.
    pub fn memory_snapshot(&self) -> Vec<u8> {
        #[derive(Serialize)]
        struct Snapshot<'a> {
            agent_id: &'a str,
            profile_id: &'a str,
            imsi: &'a str,
            measurement: Measurement,
            environment_id: &'a str,
            root_id: &'a str,
            #[serde(with = "hexfmt")]
            root_public_key: [u8; 32],
            transcript: &'a [TranscriptStep],
        }
        serde_json::to_vec(&Snapshot {
            agent_id: &self.agent_id,
            profile_id: &self.profile_id,
            imsi: &self.imsi,
            measurement: self.measurement,
            environment_id: &self.environment_id,
            root_id: self.tee.root_id(),
            root_public_key: self.tee.public_key(),
            transcript: &self.transcript,
        })
        .expect("snapshot serializes")
    }
}

/// A service that challenges agents and checks their answers with the
/// operator's network core.
#[derive(Clone)]
pub struct RelyingService {
    api: Arc<dyn TelcoApi>,
}

impl RelyingService {
    pub fn new(api: Arc<dyn TelcoApi>) -> Self {
        Self { api }
    }

    pub async fn challenge(&self, imsi: &str) -> Result<Challenge, ApiError> {
        self.api.network_challenge(imsi).await
    }

    pub async fn confirm(&self, challenge_id: &str, res: [u8; 8]) -> Result<bool, ApiError> {
        let r = self
            .api
            .network_confirm(ConfirmRequest {
                challenge_id: challenge_id.to_owned(),
                res,
            })
            .await?;
        Ok(r.authenticated)
    }

    pub async fn resync(&self, imsi: &str, rand: [u8; 16], auts: [u8; 14]) -> Result<(), ApiError> {
        self.api
            .network_resync(ResyncRequest {
                imsi: imsi.to_owned(),
                rand,
                auts,
            })
            .await
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthSessionResult {
    pub authenticated: bool,
    pub resync_rounds: u32,
    pub transcript: Vec<TranscriptStep>,
}

/// Relying service challenges, agent answers through the gateway, relying
/// service confirms. A SyncFailure triggers one resynchronisation round.
pub async fn agent_authenticate(
    runtime: &mut AgentRuntime,
    relying: &RelyingService,
) -> Result<AuthSessionResult, HarnessError> {
    let start = runtime.transcript.len();
    let mut resync_rounds = 0;
    loop {
        let ch = relying.challenge(&runtime.imsi).await?;
        runtime.log("relying->network: challenge", "issued", None);
        let token = runtime.attest();
        let req = AuthenticateRequest {
            profile_id: runtime.profile_id.clone(),
            rand: ch.rand,
            autn: ch.autn,
        };
        let digest = authenticate_request_digest(&req, Some(&token));
        let resp = match runtime.api.authenticate(req, Some(token)).await {
            Ok(r) => r,
            Err(e) => {
                runtime.log("agent->gateway: authenticate", e.kind(), Some(digest));
                return Err(e.into());
            }
        };
        runtime.log("agent->gateway: authenticate", resp.outcome.label(), Some(digest));
        match resp.outcome {
            AuthenticateOutcome::Success { res, .. } => {
                let ok = relying.confirm(&ch.challenge_id.0, res).await?;
                runtime.log("relying->network: confirm", if ok { "authenticated" } else { "rejected" }, None);
                return Ok(AuthSessionResult {
                    authenticated: ok,
                    resync_rounds,
                    transcript: runtime.transcript[start..].to_vec(),
                });
            }
            AuthenticateOutcome::SyncFailure { auts } if resync_rounds == 0 => {
                relying.resync(&runtime.imsi, ch.rand, auts).await?;
                runtime.log("relying->network: resync", "ok", None);
                resync_rounds += 1;
            }
            AuthenticateOutcome::SyncFailure { .. } => return Err(HarnessError::ResyncExhausted),
            AuthenticateOutcome::MacFailure => return Err(HarnessError::AuthFailed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedAgentMessage {
    pub sender_profile_id: String,
    #[serde(with = "payload_b64")]
    pub payload: Vec<u8>,
    pub payload_digest: Digest32,
    #[serde(with = "hexfmt")]
    pub signature: [u8; 64],
    #[serde(with = "hexfmt")]
    pub sender_public_key: [u8; 32],
}

mod payload_b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        STANDARD.decode(String::deserialize(d)?).map_err(D::Error::custom)
    }
}

pub async fn send_signed_message(
    runtime: &mut AgentRuntime,
    payload: &[u8],
) -> Result<SignedAgentMessage, HarnessError> {
    let payload_digest = Digest32::of(payload);
    let token = runtime.attest();
    let req = SignRequest {
        profile_id: runtime.profile_id.clone(),
        payload_digest,
    };
    let digest = sign_request_digest(&req, Some(&token));
    match runtime.api.sign(req, Some(token)).await {
        Ok(r) => {
            runtime.log("agent->gateway: sign", "signed", Some(digest));
            Ok(SignedAgentMessage {
                sender_profile_id: r.profile_id,
                payload: payload.to_vec(),
                payload_digest,
                signature: r.signature,
                sender_public_key: r.public_key,
            })
        }
        Err(e) => {
            runtime.log("agent->gateway: sign", e.kind(), Some(digest));
            Err(e.into())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerVerification {
    pub valid: bool,
    pub sender_state: Option<ProfileState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(skip)]
    pub request_digest: Option<Digest32>,
}

/// Valid iff the signature checks locally under the carried key and the
/// gateway reports that key for an Active sender profile.
pub async fn verify_peer_message(msg: &SignedAgentMessage, gateway: &dyn TelcoApi) -> PeerVerification {
    let local = Digest32::of(&msg.payload) == msg.payload_digest
        && verify_profile_signature(
            &msg.sender_public_key,
            &msg.sender_profile_id,
            msg.payload_digest.as_bytes(),
            &msg.signature,
        );
    let digest = status_request_digest(&msg.sender_profile_id, None);
    let status = match gateway.status(&msg.sender_profile_id, None).await {
        Ok(s) => s,
        Err(e) => {
            return PeerVerification {
                valid: false,
                sender_state: None,
                reason: Some(format!("status lookup failed: {}", e.kind())),
                request_digest: Some(digest),
            }
        }
    };
    let state = status.profile.state;
    let reason = if !local {
        Some("signature does not verify".to_owned())
    } else if status.profile.public_key != msg.sender_public_key {
        Some("public key does not match sender's profile".to_owned())
    } else if state != ProfileState::Active {
        Some(format!("sender profile is {state}"))
    } else {
        None
    };
    PeerVerification {
        valid: reason.is_none(),
        sender_state: Some(state),
        reason,
        request_digest: Some(digest),
    }
}
