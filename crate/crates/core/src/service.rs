//! The identity gateway: the only path from agents to the vault.
//!
//! Every identity request runs the same decision pipeline under its profile's
//! gate (a mutex that also covers the vault call and the audit append):
//!
//! ProfileState, Attestation, PolicyValidity, OpPermission, CidrScope,
//! MeasurementMatch, RateLimit.
//!
//! The first failing check names the denial. Exactly one audit record is
//! appended per response, and a response is released only after its record is
//! durable; if the append fails the request fails closed.

use crate::aka::{MilenageKeyMaterial, KEY_LEN};
use crate::attestation::{verify_envelope, AttestationFailure, Presented, RootRegistry};
use crate::audit::{AuditEntry, AuditLog, AuditOperation, AuditOutcome, AuditRecord};
use crate::clock::Clock;
use crate::config::{Config, ConfigError, DefaultPolicy};
use crate::digest::{Digest32, Measurement};
use crate::ids::IdAllocator;
use crate::network::{Challenge, NetworkCore};
use crate::policy::{enforce_policy, DelegationPolicy, Denial, DenyReason, Operation, PolicyRequest, RateWindow, Validity};
use crate::vault::{AkaOutcome, BindingMetadata, ProfileId, ProfileState, SimProfile, Vault};
use crate::wire::*;
use ed25519_dalek::SigningKey;
use parking_lot::{Mutex, RwLock};
use rand::rngs::OsRng;
use rand::RngCore;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error;

pub const VAULT_FILE: &str = "vault.state";
pub const NETWORK_FILE: &str = "network.json";
pub const AUDIT_FILE: &str = "audit.log";
pub const POLICY_FILE: &str = "policies.json";
pub const LOCK_FILE: &str = "state.lock";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("state directory {path}: {message}")]
    State { path: PathBuf, message: String },
}

fn state_err(path: &Path, e: impl ToString) -> ServiceError {
    ServiceError::State {
        path: path.to_owned(),
        message: e.to_string(),
    }
}

/// Per-profile decision state. The binding is immutable, so its measurements
/// are cached here.
struct Gate {
    policy: DelegationPolicy,
    window: RateWindow,
    expected: BTreeSet<Measurement>,
}

type GateRef = Arc<Mutex<Gate>>;

pub struct IdentityService {
    vault: Vault,
    network: NetworkCore,
    audit: AuditLog,
    roots: RootRegistry,
    clock: Arc<dyn Clock>,
    allocator: IdAllocator,
    default_policy: DefaultPolicy,
    gates: RwLock<HashMap<String, GateRef>>,
    /// Mirror of every gate's policy, written to `policies.json`.
    policies: Mutex<BTreeMap<String, DelegationPolicy>>,
    policy_path: Option<PathBuf>,
    provision_lock: Mutex<()>,
    /// Exclusive lock on the state directory, held for the service's lifetime.
    _dir_lock: Option<std::fs::File>,
}

impl IdentityService {
    /// Opens (or initialises) the state directory named by `config`.
    pub fn open(config: &Config, clock: Arc<dyn Clock>) -> Result<Self, ServiceError> {
        config.validate()?;
        let dir = &config.state_dir;
        std::fs::create_dir_all(dir).map_err(|e| state_err(dir, e))?;
        let lock_path = dir.join(LOCK_FILE);
        let lock = std::fs::File::create(&lock_path).map_err(|e| state_err(&lock_path, e))?;
        lock.try_lock().map_err(|e| match e {
            std::fs::TryLockError::WouldBlock => state_err(dir, "in use by another process"),
            std::fs::TryLockError::Error(e) => state_err(&lock_path, e),
        })?;
        let vault_path = dir.join(VAULT_FILE);
        let vault = Vault::open(&vault_path).map_err(|e| state_err(&vault_path, e))?;
        let net_path = dir.join(NETWORK_FILE);
        let network = NetworkCore::open(
            &net_path,
            config.network_settings(),
            clock.clone(),
            vault.subscriber_material(),
        )
        .map_err(|e| state_err(&net_path, e))?;
        let audit_path = dir.join(AUDIT_FILE);
        let audit = AuditLog::open(&audit_path).map_err(|e| state_err(&audit_path, e))?;
        let policy_path = dir.join(POLICY_FILE);
        let policies: BTreeMap<String, DelegationPolicy> = match std::fs::read(&policy_path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| state_err(&policy_path, e))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(state_err(&policy_path, e)),
        };
        let mut svc = Self::assemble(config, clock, vault, network, audit, Some(policy_path))?;
        svc._dir_lock = Some(lock);
        svc.load_gates(policies);
        Ok(svc)
    }

    /// Everything in memory; for tests and throwaway runs.
    pub fn in_memory(config: &Config, clock: Arc<dyn Clock>) -> Result<Self, ServiceError> {
        Self::in_memory_with_audit(config, clock, AuditLog::in_memory())
    }

    pub fn in_memory_with_audit(
        config: &Config,
        clock: Arc<dyn Clock>,
        audit: AuditLog,
    ) -> Result<Self, ServiceError> {
        config.validate()?;
        let network = NetworkCore::in_memory(config.network_settings(), clock.clone());
        Self::assemble(config, clock, Vault::in_memory(), network, audit, None)
    }

    fn assemble(
        config: &Config,
        clock: Arc<dyn Clock>,
        vault: Vault,
        network: NetworkCore,
        audit: AuditLog,
        policy_path: Option<PathBuf>,
    ) -> Result<Self, ServiceError> {
        Ok(Self {
            vault,
            network,
            audit,
            roots: config.roots()?,
            clock,
            allocator: config.allocator()?,
            default_policy: config.default_policy.clone(),
            gates: RwLock::default(),
            policies: Mutex::default(),
            policy_path,
            provision_lock: Mutex::new(()),
            _dir_lock: None,
        })
    }

    fn load_gates(&self, mut stored: BTreeMap<String, DelegationPolicy>) {
        let mut gates = self.gates.write();
        let mut mirror = self.policies.lock();
        for id in self.vault.profile_ids() {
            let Ok(status) = self.vault.get_profile_status(id.as_str()) else {
                continue;
            };
            let policy = stored.remove(id.as_str()).unwrap_or_else(|| {
                // Fail closed: a profile whose policy was lost is unusable
                // until an operator installs a new one.
                tracing::warn!(profile_id = %id, "no stored policy; installing an expired placeholder");
                let mut p = self.default_policy.instantiate(
                    status.policy_id.clone(),
                    crate::clock::Timestamp::from_millis(0),
                    &status.binding.expected_measurements,
                );
                p.validity = Validity {
                    not_before: crate::clock::Timestamp::from_millis(0),
                    not_after: crate::clock::Timestamp::from_millis(1),
                };
                p
            });
            mirror.insert(id.as_str().to_owned(), policy.clone());
            gates.insert(
                id.as_str().to_owned(),
                Arc::new(Mutex::new(Gate {
                    policy,
                    window: RateWindow::new(),
                    expected: status.binding.expected_measurements,
                })),
            );
        }
    }

    pub fn vault(&self) -> &Vault {
        &self.vault
    }

    pub fn network(&self) -> &NetworkCore {
        &self.network
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    fn gate(&self, profile_id: &str) -> Option<GateRef> {
        self.gates.read().get(profile_id).cloned()
    }

    fn record(
        &self,
        profile_id: &str,
        operation: AuditOperation,
        outcome: AuditOutcome,
        request_digest: Digest32,
    ) -> Result<AuditRecord, ApiError> {
        self.audit
            .append(
                self.clock.now(),
                AuditEntry {
                    profile_id: profile_id.to_owned(),
                    operation,
                    outcome,
                    request_digest,
                },
            )
            .map_err(|e| {
                tracing::error!(error = %e, "audit append failed; failing request closed");
                ApiError::Unavailable {
                    message: e.to_string(),
                }
            })
    }

    /// Audits a failed request and hands back its error. If the audit append
    /// itself fails, that storage error wins.
    fn fail(&self, profile_id: &str, op: AuditOperation, digest: Digest32, err: ApiError) -> ApiError {
        let outcome = match &err {
            ApiError::Denied(d) => AuditOutcome::Denied {
                reason: d.reason,
                detail: d.detail.clone(),
            },
            other => AuditOutcome::Error { kind: other.kind() },
        };
        match self.record(profile_id, op, outcome, digest) {
            Ok(_) => err,
            Err(storage) => storage,
        }
    }

    fn locate(&self, profile_id: &str, op: AuditOperation, digest: Digest32) -> Result<GateRef, ApiError> {
        self.gate(profile_id).ok_or_else(|| {
            let err = ApiError::UnknownProfile {
                profile_id: profile_id.to_owned(),
            };
            self.fail(profile_id, op, digest, err)
        })
    }

    /// The full decision pipeline for a crypto operation. Spends rate budget
    /// only when every check passes.
    fn admit(
        &self,
        gate: &mut Gate,
        profile_id: &str,
        op: Operation,
        presented: &Presented,
        source: IpAddr,
    ) -> Result<(), Denial> {
        let now = self.clock.now();
        let state = self
            .vault
            .state(profile_id)
            .map_err(|_| Denial::with_detail(DenyReason::ProfileState, "unknown"))?;
        if state != ProfileState::Active {
            return Err(Denial::with_detail(DenyReason::ProfileState, state.to_string()));
        }
        let token = match presented {
            Presented::Absent => return Err(attestation_denial(AttestationFailure::Missing)),
            Presented::Malformed => return Err(attestation_denial(AttestationFailure::Malformed)),
            Presented::Token(t) => t,
        };
        verify_envelope(token, &self.roots, now).map_err(attestation_denial)?;
        let Gate {
            policy,
            window,
            expected,
        } = gate;
        enforce_policy(
            policy,
            &PolicyRequest {
                op,
                source,
                now,
                measurement: &token.claims.measurement,
                expected_measurements: expected,
            },
            window,
        )
    }

    pub fn handle_sign(
        &self,
        req: &SignRequest,
        presented: &Presented,
        source: IpAddr,
    ) -> Result<SignResponse, ApiError> {
        let op = AuditOperation::Sign;
        let digest = sign_request_digest(req, presented.token());
        let id = req.profile_id.as_str();
        let gate = self.locate(id, op, digest)?;
        let mut g = gate.lock();
        if let Err(d) = self.admit(&mut g, id, Operation::Sign, presented, source) {
            return Err(self.fail(id, op, digest, ApiError::Denied(d)));
        }
        let out = self
            .vault
            .usim_sign(id, req.payload_digest.as_bytes())
            .map_err(|e| self.fail(id, op, digest, e.into()))?;
        let rec = self.record(id, op, AuditOutcome::allowed(), digest)?;
        Ok(SignResponse {
            profile_id: out.profile_id.as_str().to_owned(),
            signature: out.signature,
            public_key: out.public_key,
            audit_seq: rec.seq,
        })
    }

    /// A SyncFailure or MacFailure from the vault is a completed operation,
    /// audited as allowed with the outcome in the detail.
    pub fn handle_authenticate(
        &self,
        req: &AuthenticateRequest,
        presented: &Presented,
        source: IpAddr,
    ) -> Result<AuthenticateResponse, ApiError> {
        let op = AuditOperation::Authenticate;
        let digest = authenticate_request_digest(req, presented.token());
        let id = req.profile_id.as_str();
        let gate = self.locate(id, op, digest)?;
        let mut g = gate.lock();
        if let Err(d) = self.admit(&mut g, id, Operation::Authenticate, presented, source) {
            return Err(self.fail(id, op, digest, ApiError::Denied(d)));
        }
        let outcome = match self.vault.usim_authenticate(id, &req.rand, &req.autn) {
            Ok(AkaOutcome::Success { res, ck, ik }) => AuthenticateOutcome::Success { res, ck, ik },
            Ok(AkaOutcome::SyncFailure { auts }) => AuthenticateOutcome::SyncFailure {
                auts: auts.to_bytes(),
            },
            Ok(AkaOutcome::MacFailure) => AuthenticateOutcome::MacFailure,
            Err(e) => return Err(self.fail(id, op, digest, e.into())),
        };
        let detail = Some(outcome.label().to_owned());
        let rec = self.record(id, op, AuditOutcome::Allowed { detail }, digest)?;
        Ok(AuthenticateResponse {
            profile_id: id.to_owned(),
            outcome,
            audit_seq: rec.seq,
        })
    }

    /// Status is read-only: no state, validity, scope, measurement or rate
    /// checks. A supplied token must still verify, and the policy must list
    /// Status.
    pub fn handle_status(
        &self,
        profile_id: &str,
        presented: &Presented,
        _source: IpAddr,
    ) -> Result<StatusResponse, ApiError> {
        let op = AuditOperation::Status;
        let digest = status_request_digest(profile_id, presented.token());
        let gate = self.locate(profile_id, op, digest)?;
        let g = gate.lock();
        let now = self.clock.now();
        let checked = match presented {
            Presented::Absent => Ok(()),
            Presented::Malformed => Err(AttestationFailure::Malformed),
            Presented::Token(t) => verify_envelope(t, &self.roots, now),
        };
        if let Err(f) = checked {
            return Err(self.fail(profile_id, op, digest, ApiError::Denied(attestation_denial(f))));
        }
        if !g.policy.allowed_ops.contains(&Operation::Status) {
            let d = Denial::with_detail(DenyReason::OpPermission, Operation::Status.to_string());
            return Err(self.fail(profile_id, op, digest, ApiError::Denied(d)));
        }
        let mut profile = self
            .vault
            .get_profile_status(profile_id)
            .map_err(|e| self.fail(profile_id, op, digest, e.into()))?;
        profile.policy_id = g.policy.policy_id.clone();
        let bound = profile.state == ProfileState::Active
            && g.policy.validity.contains(now)
            && !profile.binding.expected_measurements.is_empty();
        let rate_headroom = g.window.headroom(&g.policy, now);
        let rec = self.record(profile_id, op, AuditOutcome::allowed(), digest)?;
        Ok(StatusResponse {
            profile,
            bound,
            policy: g.policy.clone(),
            rate_headroom,
            audit_seq: rec.seq,
        })
    }

    /// Allocates identifiers and fresh key material, installs the profile,
    /// registers the subscriber with the same keys, activates the profile and
    /// attaches its policy.
    pub fn provision(&self, req: &ProvisionRequest) -> Result<ProvisionResponse, ApiError> {
        let op = AuditOperation::Provision;
        let digest = admin_request_digest("Provision", req);
        let profile_id = req.profile_id.clone().unwrap_or_else(|| {
            let mut b = [0u8; 8];
            OsRng.fill_bytes(&mut b);
            format!("prof-{}", hex::encode(b))
        });
        self.provision_inner(&profile_id, req)
            .map_err(|e| self.fail(&profile_id, op, digest, e))
            .and_then(|(mut resp, policy)| {
                let detail = Some(format!("policy {}", policy.policy_id));
                match self.record(&profile_id, op, AuditOutcome::Allowed { detail }, digest) {
                    Ok(rec) => {
                        resp.audit_seq = rec.seq;
                        Ok(resp)
                    }
                    Err(e) => {
                        // An identity nobody can account for must not stay usable.
                        let _ = self.vault.set_profile_state(&profile_id, ProfileState::Revoked);
                        Err(e)
                    }
                }
            })
    }

    fn provision_inner(
        &self,
        profile_id: &str,
        req: &ProvisionRequest,
    ) -> Result<(ProvisionResponse, DelegationPolicy), ApiError> {
        let _serial = self.provision_lock.lock();
        if req.expected_measurements.is_empty() {
            return Err(ApiError::InvalidProfile {
                field: "expected_measurements".into(),
            });
        }
        if self.gate(profile_id).is_some() {
            return Err(ApiError::DuplicateProfile {
                field: "profile_id".into(),
            });
        }
        let now = self.clock.now();
        let policy = match &req.initial_policy {
            Some(p) => p.clone(),
            None => self.default_policy.instantiate(
                format!("{profile_id}/default"),
                now,
                &req.expected_measurements,
            ),
        };
        policy.validate().map_err(|e| ApiError::InvalidPolicy {
            message: e.0.to_owned(),
        })?;

        let msin = self
            .vault
            .imsis()
            .iter()
            .filter_map(|i| self.allocator.msin_of(i))
            .max()
            .map_or(1, |m| m + 1);
        let (imsi, iccid) = self
            .allocator
            .identifiers(msin)
            .map_err(|e| ApiError::Unavailable { message: e.to_string() })?;

        let mut k = [0u8; KEY_LEN];
        let mut opc = [0u8; KEY_LEN];
        OsRng.fill_bytes(&mut k);
        OsRng.fill_bytes(&mut opc);
        let km = MilenageKeyMaterial::from_opc(&k, &opc).expect("fixed-size key material");
        zeroize::Zeroize::zeroize(&mut k);
        zeroize::Zeroize::zeroize(&mut opc);

        let binding = BindingMetadata {
            agent_public_key: req.agent_public_key,
            expected_measurements: req.expected_measurements.clone(),
            enterprise_namespace: req.enterprise_namespace.clone(),
            container_fingerprint: req.container_fingerprint,
            deployment_manifest_digest: req.deployment_manifest_digest,
        };
        let profile = SimProfile::new(
            ProfileId::new(profile_id),
            iccid.clone(),
            imsi.clone(),
            km.clone(),
            SigningKey::generate(&mut OsRng),
            binding,
            policy.policy_id.clone(),
        );
        let public_key = profile.public_key();
        self.vault.install_profile(profile)?;
        if let Err(e) = self.network.register_subscriber(imsi.as_str(), km) {
            // Never leave a usable half-provisioned identity behind.
            let _ = self.vault.set_profile_state(profile_id, ProfileState::Revoked);
            return Err(e.into());
        }
        self.persist_policy(profile_id, &policy)?;
        self.gates.write().insert(
            profile_id.to_owned(),
            Arc::new(Mutex::new(Gate {
                policy: policy.clone(),
                window: RateWindow::new(),
                expected: req.expected_measurements.clone(),
            })),
        );
        let state = {
            self.vault.set_profile_state(profile_id, ProfileState::Active)?;
            ProfileState::Active
        };
        tracing::info!(profile_id, imsi = %imsi, "provisioned");
        Ok((
            ProvisionResponse {
                profile_id: profile_id.to_owned(),
                imsi,
                iccid,
                public_key,
                state,
                policy_id: policy.policy_id.clone(),
                audit_seq: 0,
            },
            policy,
        ))
    }

    fn persist_policy(&self, profile_id: &str, policy: &DelegationPolicy) -> Result<(), ApiError> {
        let mut mirror = self.policies.lock();
        let previous = mirror.insert(profile_id.to_owned(), policy.clone());
        let Some(path) = &self.policy_path else {
            return Ok(());
        };
        let bytes = serde_json::to_vec_pretty(&*mirror).expect("policies serialize");
        crate::fsutil::write_atomic(path, &bytes).map_err(|e| {
            match previous {
                Some(p) => mirror.insert(profile_id.to_owned(), p),
                None => mirror.remove(profile_id),
            };
            ApiError::Unavailable { message: e.to_string() }
        })
    }

    /// Suspend, resume or revoke. The state write happens under the profile
    /// gate, so every request admitted after this returns sees the new state.
    pub fn lifecycle(&self, req: &LifecycleRequest) -> Result<LifecycleResponse, ApiError> {
        let op = AuditOperation::StateChange;
        let digest = admin_request_digest("StateChange", req);
        let id = req.profile_id.as_str();
        let gate = self.locate(id, op, digest)?;
        let _g = gate.lock();
        let to = req.action.target();
        let from = self
            .vault
            .set_profile_state(id, to)
            .map_err(|e| self.fail(id, op, digest, e.into()))?;
        let mut detail = format!("{from}->{to}");
        if from == to {
            detail.push_str(" (no-op)");
        }
        if !req.reason.is_empty() {
            detail.push_str(": ");
            detail.push_str(&req.reason);
        }
        let rec = self.record(id, op, AuditOutcome::Allowed { detail: Some(detail) }, digest)?;
        Ok(LifecycleResponse {
            profile_id: id.to_owned(),
            previous_state: from,
            state: to,
            audit_seq: rec.seq,
        })
    }

    pub fn revoke_profile(&self, req: &RevokeRequest) -> Result<LifecycleResponse, ApiError> {
        self.lifecycle(&LifecycleRequest {
            profile_id: req.profile_id.clone(),
            action: LifecycleAction::Revoke,
            reason: req.reason.clone(),
        })
    }

    /// Swaps the policy atomically. The rate window carries over, so a
    /// tightened limit applies to operations already in the window.
    pub fn update_policy(&self, req: &PolicyUpdateRequest) -> Result<PolicyUpdateResponse, ApiError> {
        let op = AuditOperation::PolicyUpdate;
        let digest = admin_request_digest("PolicyUpdate", req);
        let id = req.profile_id.as_str();
        let gate = self.locate(id, op, digest)?;
        let mut g = gate.lock();
        if let Err(e) = req.policy.validate() {
            let err = ApiError::InvalidPolicy { message: e.0.to_owned() };
            return Err(self.fail(id, op, digest, err));
        }
        self.persist_policy(id, &req.policy)
            .map_err(|e| self.fail(id, op, digest, e))?;
        let previous = std::mem::replace(&mut g.policy, req.policy.clone());
        let detail = format!("{}->{}", previous.policy_id, req.policy.policy_id);
        let rec = self.record(id, op, AuditOutcome::Allowed { detail: Some(detail) }, digest)?;
        Ok(PolicyUpdateResponse {
            profile_id: id.to_owned(),
            previous_policy_id: previous.policy_id,
            policy_id: req.policy.policy_id.clone(),
            audit_seq: rec.seq,
        })
    }

    /// Audits a request refused before it reached an operation (bad admin
    /// credential, unparsable body) and returns the error to send.
    pub fn refuse(&self, what: &str, err: ApiError) -> ApiError {
        let digest = request_digest("Deny", &[what.as_bytes()]);
        let outcome = AuditOutcome::Error {
            kind: format!("{}:{what}", err.kind()),
        };
        match self.record("", AuditOperation::Deny, outcome, digest) {
            Ok(_) => err,
            Err(e) => e,
        }
    }

    pub fn audit_verify(&self) -> AuditVerifyResponse {
        AuditVerifyResponse {
            verdict: self.audit.verify(),
            records: self.audit.len() as u64,
            head_hash: self.audit.head(),
        }
    }

    pub fn audit_records(&self, from: u64, limit: usize) -> AuditRecordsResponse {
        AuditRecordsResponse {
            records: self.audit.records(from, limit),
        }
    }

    pub fn policy(&self, profile_id: &str) -> Option<DelegationPolicy> {
        self.gate(profile_id).map(|g| g.lock().policy.clone())
    }

    pub fn network_challenge(&self, imsi: &str) -> Result<Challenge, ApiError> {
        Ok(self.network.generate_challenge(imsi)?)
    }

    pub fn network_confirm(&self, req: &ConfirmRequest) -> Result<ConfirmResponse, ApiError> {
        let authenticated = self.network.confirm_res(&req.challenge_id, &req.res)?;
        Ok(ConfirmResponse { authenticated })
    }

    pub fn network_resync(&self, req: &ResyncRequest) -> Result<(), ApiError> {
        Ok(self.network.resynchronize(&req.imsi, &req.rand, &req.auts)?)
    }
}

fn attestation_denial(f: AttestationFailure) -> Denial {
    Denial::with_detail(DenyReason::Attestation, format!("{f:?}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attestation::AttestationClaims;
    use crate::audit::AuditSink;
    use crate::clock::{ManualClock, Timestamp};
    use crate::config::RootConfig;
    use crate::policy::RateLimit;
    use crate::vault::verify_profile_signature;
    use std::net::Ipv4Addr;

    const LOOPBACK: IpAddr = IpAddr::V4(Ipv4Addr::LOCALHOST);

    struct Fixture {
        svc: IdentityService,
        clock: Arc<ManualClock>,
        root: SigningKey,
        measurement: Measurement,
    }

    fn fixture() -> Fixture {
        fixture_with_audit(AuditLog::in_memory())
    }

    fn fixture_with_audit(audit: AuditLog) -> Fixture {
        let root = SigningKey::from_bytes(&[42; 32]);
        let config = Config {
            attestation_roots: vec![RootConfig {
                root_id: "tee".into(),
                public_key: hex::encode(root.verifying_key().to_bytes()),
            }],
            ..Config::default()
        };
        let clock = Arc::new(ManualClock::new(Timestamp::from_secs(1_700_000_000)));
        let svc = IdentityService::in_memory_with_audit(&config, clock.clone(), audit).unwrap();
        Fixture {
            svc,
            clock,
            root,
            measurement: Measurement::of(b"agent v1"),
        }
    }

    impl Fixture {
        fn provision(&self, id: &str) -> ProvisionResponse {
            self.svc
                .provision(&ProvisionRequest {
                    profile_id: Some(id.into()),
                    agent_public_key: SigningKey::from_bytes(&[1; 32]).verifying_key().to_bytes(),
                    expected_measurements: [self.measurement].into(),
                    enterprise_namespace: "acme".into(),
                    container_fingerprint: None,
                    deployment_manifest_digest: None,
                    initial_policy: None,
                })
                .unwrap()
        }

        fn token(&self) -> Presented {
            let now = self.clock.now();
            Presented::Token(
                AttestationClaims {
                    measurement: self.measurement,
                    environment_id: "vm-1".into(),
                    issued_at: now,
                    expires_at: now.plus_secs(300),
                    nonce: [0; 16],
                    root_id: "tee".into(),
                }
                .sign(&self.root),
            )
        }

        fn sign(&self, id: &str) -> Result<SignResponse, ApiError> {
            let req = SignRequest {
                profile_id: id.into(),
                payload_digest: Digest32::of(b"hello"),
            };
            self.svc.handle_sign(&req, &self.token(), LOOPBACK)
        }
    }

    fn reason(r: Result<impl std::fmt::Debug, ApiError>) -> DenyReason {
        r.unwrap_err().denial().expect("a denial").reason
    }

    #[test]
    fn provision_then_sign() {
        let f = fixture();
        let p = f.provision("a1");
        assert_eq!(p.state, ProfileState::Active);
        assert!(p.imsi.as_str().starts_with("00101"));
        let s = f.sign("a1").unwrap();
        assert!(verify_profile_signature(&p.public_key, "a1", Digest32::of(b"hello").as_bytes(), &s.signature));
        assert!(f.svc.audit_verify().verdict.is_intact());
        assert_eq!(f.svc.audit().len(), 2);
    }

    #[test]
    fn sequential_identifiers() {
        let f = fixture();
        let a = f.provision("a1");
        let b = f.provision("a2");
        assert_eq!(a.imsi.as_str(), "001010000000001");
        assert_eq!(b.imsi.as_str(), "001010000000002");
        assert!(crate::ids::luhn_valid(b.iccid.as_str()));
    }

    #[test]
    fn duplicate_and_empty_measurements() {
        let f = fixture();
        f.provision("a1");
        let mut req = ProvisionRequest {
            profile_id: Some("a1".into()),
            agent_public_key: SigningKey::from_bytes(&[1; 32]).verifying_key().to_bytes(),
            expected_measurements: [f.measurement].into(),
            enterprise_namespace: "acme".into(),
            container_fingerprint: None,
            deployment_manifest_digest: None,
            initial_policy: None,
        };
        assert!(matches!(f.svc.provision(&req), Err(ApiError::DuplicateProfile { .. })));
        req.profile_id = Some("a2".into());
        req.expected_measurements.clear();
        assert_eq!(
            f.svc.provision(&req).unwrap_err(),
            ApiError::InvalidProfile { field: "expected_measurements".into() }
        );
    }

    #[test]
    fn missing_and_malformed_tokens_are_attestation_denials() {
        let f = fixture();
        f.provision("a1");
        let req = SignRequest {
            profile_id: "a1".into(),
            payload_digest: Digest32::ZERO,
        };
        for p in [Presented::Absent, Presented::Malformed] {
            assert_eq!(reason(f.svc.handle_sign(&req, &p, LOOPBACK)), DenyReason::Attestation);
        }
    }

    #[test]
    fn revoked_profile_state_wins_over_everything() {
        let f = fixture();
        f.provision("a1");
        f.svc
            .revoke_profile(&RevokeRequest {
                profile_id: "a1".into(),
                reason: "test".into(),
            })
            .unwrap();
        let req = SignRequest {
            profile_id: "a1".into(),
            payload_digest: Digest32::ZERO,
        };
        assert_eq!(reason(f.svc.handle_sign(&req, &Presented::Absent, LOOPBACK)), DenyReason::ProfileState);
        let again = f.svc.revoke_profile(&RevokeRequest {
            profile_id: "a1".into(),
            reason: String::new(),
        });
        assert_eq!(again.unwrap().previous_state, ProfileState::Revoked);
    }

    #[test]
    fn lifecycle_transitions() {
        let f = fixture();
        f.provision("a1");
        let act = |action| {
            f.svc.lifecycle(&LifecycleRequest {
                profile_id: "a1".into(),
                action,
                reason: String::new(),
            })
        };
        assert_eq!(act(LifecycleAction::Suspend).unwrap().state, ProfileState::Suspended);
        assert_eq!(reason(f.sign("a1")), DenyReason::ProfileState);
        assert_eq!(act(LifecycleAction::Resume).unwrap().state, ProfileState::Active);
        assert!(f.sign("a1").is_ok());
        act(LifecycleAction::Revoke).unwrap();
        assert!(matches!(act(LifecycleAction::Resume), Err(ApiError::IllegalTransition { .. })));
    }

    #[test]
    fn tightened_policy_applies_to_the_current_window() {
        let f = fixture();
        f.provision("a1");
        assert!(f.sign("a1").is_ok());
        let mut p = f.svc.policy("a1").unwrap();
        p.policy_id = "tight".into();
        p.rate_limit = RateLimit { n: 1, window_seconds: 60 };
        let r = f
            .svc
            .update_policy(&PolicyUpdateRequest {
                profile_id: "a1".into(),
                policy: p.clone(),
            })
            .unwrap();
        assert_eq!(r.previous_policy_id, "a1/default");
        assert_eq!(reason(f.sign("a1")), DenyReason::RateLimit);
        f.clock.advance_secs(60);
        assert!(f.sign("a1").is_ok());

        p.validity.not_after = p.validity.not_before;
        assert!(matches!(
            f.svc.update_policy(&PolicyUpdateRequest { profile_id: "a1".into(), policy: p.clone() }),
            Err(ApiError::InvalidPolicy { .. })
        ));
        assert!(matches!(
            f.svc.update_policy(&PolicyUpdateRequest { profile_id: "zz".into(), policy: p }),
            Err(ApiError::UnknownProfile { .. })
        ));
    }

    #[test]
    fn status_document() {
        let f = fixture();
        f.provision("a1");
        let s = f.svc.handle_status("a1", &Presented::Absent, LOOPBACK).unwrap();
        assert!(s.bound);
        assert_eq!(s.rate_headroom, 10);
        f.sign("a1").unwrap();
        assert_eq!(f.svc.handle_status("a1", &Presented::Absent, LOOPBACK).unwrap().rate_headroom, 9);
        f.svc.revoke_profile(&RevokeRequest { profile_id: "a1".into(), reason: String::new() }).unwrap();
        let s = f.svc.handle_status("a1", &Presented::Absent, LOOPBACK).unwrap();
        assert_eq!(s.profile.state, ProfileState::Revoked);
        assert!(!s.bound);
        assert!(matches!(
            f.svc.handle_status("nope", &Presented::Absent, LOOPBACK),
            Err(ApiError::UnknownProfile { .. })
        ));
    }

    #[test]
    fn every_response_is_audited_once() {
        let f = fixture();
        f.provision("a1");
        let before = f.svc.audit().len();
        let _ = f.sign("a1");
        let _ = f.sign("missing");
        let _ = f.svc.handle_status("a1", &Presented::Malformed, LOOPBACK);
        let _ = f.svc.handle_sign(
            &SignRequest { profile_id: "a1".into(), payload_digest: Digest32::ZERO },
            &Presented::Absent,
            LOOPBACK,
        );
        assert_eq!(f.svc.audit().len(), before + 4);
    }

    #[test]
    fn end_to_end_aka() {
        let f = fixture();
        let p = f.provision("a1");
        let ch = f.svc.network_challenge(p.imsi.as_str()).unwrap();
        let req = AuthenticateRequest { profile_id: "a1".into(), rand: ch.rand, autn: ch.autn };
        let resp = f.svc.handle_authenticate(&req, &f.token(), LOOPBACK).unwrap();
        let AuthenticateOutcome::Success { res, .. } = resp.outcome else {
            panic!("expected success, got {:?}", resp.outcome);
        };
        let ok = f.svc.network_confirm(&ConfirmRequest { challenge_id: ch.challenge_id.0.clone(), res }).unwrap();
        assert!(ok.authenticated);
        let replay = f.svc.handle_authenticate(&req, &f.token(), LOOPBACK).unwrap();
        assert_eq!(replay.outcome.label(), "sync_failure");
    }

    struct Failing;

    impl AuditSink for Failing {
        fn append(&mut self, _: &[u8]) -> std::io::Result<()> {
            Err(std::io::Error::other("disk full"))
        }
    }

    #[test]
    fn audit_failure_fails_closed() {
        let f = fixture_with_audit(AuditLog::with_sink(Box::new(Failing)));
        let err = f.svc.provision(&ProvisionRequest {
            profile_id: Some("a1".into()),
            agent_public_key: SigningKey::from_bytes(&[1; 32]).verifying_key().to_bytes(),
            expected_measurements: [f.measurement].into(),
            enterprise_namespace: "acme".into(),
            container_fingerprint: None,
            deployment_manifest_digest: None,
            initial_policy: None,
        });
        assert!(matches!(err, Err(ApiError::Unavailable { .. })));
        assert_eq!(f.svc.vault().state("a1").unwrap(), ProfileState::Revoked);
        assert!(matches!(f.sign("a1"), Err(ApiError::Unavailable { .. })));
    }

    #[test]
    fn restart_preserves_profiles_policies_and_chain() {
        let dir = tempfile::tempdir().unwrap();
        let root = SigningKey::from_bytes(&[42; 32]);
        let config = Config {
            state_dir: dir.path().to_owned(),
            attestation_roots: vec![RootConfig {
                root_id: "tee".into(),
                public_key: hex::encode(root.verifying_key().to_bytes()),
            }],
            ..Config::default()
        };
        let clock: Arc<dyn Clock> = Arc::new(ManualClock::new(Timestamp::from_secs(1_700_000_000)));
        let (imsi, policy) = {
            let manual = Arc::new(ManualClock::new(clock.now()));
            let svc = IdentityService::open(&config, manual.clone()).unwrap();
            let f = Fixture { svc, clock: manual, root: root.clone(), measurement: Measurement::of(b"agent v1") };
            let p = f.provision("a1");
            f.svc.network_challenge(p.imsi.as_str()).unwrap();
            (p.imsi, f.svc.policy("a1").unwrap())
        };
        let svc = IdentityService::open(&config, clock.clone()).unwrap();
        let busy = IdentityService::open(&config, clock).err().expect("directory is locked");
        assert!(busy.to_string().contains("in use"), "{busy}");
        assert_eq!(svc.vault().state("a1").unwrap(), ProfileState::Active);
        assert_eq!(svc.policy("a1").unwrap(), policy);
        assert_eq!(svc.network().sqn_he(imsi.as_str()).unwrap(), 1);
        assert_eq!(svc.audit_verify().records, 1);
        assert!(svc.audit_verify().verdict.is_intact());
        let ch = svc.network_challenge(imsi.as_str()).unwrap();
        let resp = svc
            .handle_authenticate(
                &AuthenticateRequest { profile_id: "a1".into(), rand: ch.rand, autn: ch.autn },
                &Presented::Token(
                    AttestationClaims {
                        measurement: Measurement::of(b"agent v1"),
                        environment_id: "vm".into(),
                        issued_at: svc.clock().now(),
                        expires_at: svc.clock().now().plus_secs(60),
                        nonce: [0; 16],
                        root_id: "tee".into(),
                    }
                    .sign(&root),
                ),
                LOOPBACK,
            )
            .unwrap();
        assert_eq!(resp.outcome.label(), "success");
    }
}
