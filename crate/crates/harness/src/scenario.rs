//! Built-in end-to-end scenarios.
//!
//! * `enterprise-alert-agent`: a sign-only alerting agent under a tight rate
//!   limit, then running unapproved code.
//! * `finance-decision-agent`: AKA login, signed decisions, and a revocation
//!   drill part way through.
//! * `agent-marketplace`: several agents exchange verified offers; one is
//!   compromised, denied and revoked.
//!
//! Reports hold only deterministic content (outcomes, counts, checks), so two
//! runs with the same config produce identical reports.

use crate::agent::*;
use crate::host::EphemeralGateway;
use crate::tee::EmulatedTee;
use agent_esim_core::audit::ChainVerdict;
use agent_esim_core::clock::{Clock, SystemClock};
use agent_esim_core::digest::{Digest32, Measurement};
use agent_esim_core::policy::{DelegationPolicy, Operation, RateLimit, Validity};
use agent_esim_core::wire::*;
use agent_esim_core::TelcoApi;
use ed25519_dalek::SigningKey;
use rand::rngs::OsRng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Display;
use std::path::Path;
use std::sync::Arc;

pub const SCENARIOS: [&str; 3] = ["enterprise-alert-agent", "finance-decision-agent", "agent-marketplace"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlertConfig {
    pub rate_limit: RateLimit,
    pub sends: u32,
}

impl Default for AlertConfig {
    fn default() -> Self {
        Self {
            rate_limit: RateLimit {
                n: 1,
                window_seconds: 3600,
            },
            sends: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinanceConfig {
    pub attempts: u32,
    /// Decisions signed before the operator revokes the profile.
    pub revoke_after: u32,
}

impl Default for FinanceConfig {
    fn default() -> Self {
        Self {
            attempts: 6,
            revoke_after: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarketplaceConfig {
    pub agents: u32,
    /// Index of the agent that gets compromised.
    pub compromised: u32,
}

impl Default for MarketplaceConfig {
    fn default() -> Self {
        Self {
            agents: 5,
            compromised: 2,
        }
    }
}

/// Scenario parameters, read from TOML. Every section is optional.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// Enterprise namespace every scenario profile is bound to.
    pub namespace: String,
    pub enterprise_alert_agent: AlertConfig,
    pub finance_decision_agent: FinanceConfig,
    pub agent_marketplace: MarketplaceConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            namespace: "acme-corp".into(),
            enterprise_alert_agent: AlertConfig::default(),
            finance_decision_agent: FinanceConfig::default(),
            agent_marketplace: MarketplaceConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    fn validate(&self) -> Result<(), HarnessError> {
        let f = &self.finance_decision_agent;
        if f.revoke_after > f.attempts {
            return Err(HarnessError::Config(
                "finance_decision_agent.revoke_after exceeds attempts".into(),
            ));
        }
        let m = &self.agent_marketplace;
        if m.agents < 2 || m.compromised >= m.agents {
            return Err(HarnessError::Config(
                "agent_marketplace needs at least 2 agents and compromised < agents".into(),
            ));
        }
        if self.namespace.trim().is_empty() {
            return Err(HarnessError::Config("namespace must not be empty".into()));
        }
        if self.enterprise_alert_agent.rate_limit.window_seconds == 0 {
            return Err(HarnessError::Config(
                "enterprise_alert_agent.rate_limit.window_seconds must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepReport {
    pub n: usize,
    pub actor: String,
    pub action: String,
    pub outcome: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expectation {
    pub check: String,
    pub expected: String,
    pub actual: String,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub chain: ChainVerdict,
    pub records: u64,
    /// Gateway-bound steps, each of which must match an audit record by
    /// request digest.
    pub transcript_steps: u64,
    pub transcript_matched: u64,
    pub transcript_complete: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub steps: Vec<StepReport>,
    pub counts: BTreeMap<String, u64>,
    pub expectations: Vec<Expectation>,
    pub audit: AuditSummary,
    pub passed: bool,
}

/// Where a scenario runs.
#[derive(Clone)]
pub struct ScenarioEnv {
    pub api: Arc<dyn TelcoApi>,
    pub tee: Arc<EmulatedTee>,
    pub clock: Arc<dyn Clock>,
}

struct Run {
    env: ScenarioEnv,
    namespace: String,
    steps: Vec<StepReport>,
    counts: BTreeMap<String, u64>,
    expectations: Vec<Expectation>,
    /// Digests of gateway requests made outside agent runtimes.
    digests: Vec<Digest32>,
    runtimes: Vec<AgentRuntime>,
}

fn outcome_of<T>(r: &Result<T, HarnessError>, ok: &str) -> String {
    match r {
        Ok(_) => ok.to_owned(),
        Err(HarnessError::DeniedByGateway(d)) => format!("denied:{}", d.reason),
        Err(HarnessError::Api(e)) => format!("error:{}", e.kind()),
        Err(e) => format!("error:{e}"),
    }
}

impl Run {
    fn step(&mut self, actor: &str, action: impl Into<String>, outcome: impl Into<String>) {
        self.steps.push(StepReport {
            n: self.steps.len() + 1,
            actor: actor.to_owned(),
            action: action.into(),
            outcome: outcome.into(),
        });
    }

    fn count(&mut self, key: &str, by: u64) {
        *self.counts.entry(key.to_owned()).or_default() += by;
    }

    fn get(&self, key: &str) -> u64 {
        self.counts.get(key).copied().unwrap_or(0)
    }

    fn expect(&mut self, check: &str, expected: impl Display, actual: impl Display) {
        let (expected, actual) = (expected.to_string(), actual.to_string());
        self.expectations.push(Expectation {
            check: check.to_owned(),
            ok: expected == actual,
            expected,
            actual,
        });
    }

    fn policy(&self, id: &str, rate: RateLimit, ops: &[Operation], code: &[u8]) -> DelegationPolicy {
        let now = self.env.clock.now();
        DelegationPolicy {
            policy_id: id.to_owned(),
            rate_limit: rate,
            validity: Validity {
                not_before: now.minus_secs(60),
                not_after: now.plus_secs(24 * 3600),
            },
            allowed_ops: ops.iter().copied().collect(),
            cidr_allowlist: vec!["127.0.0.0/8".parse().unwrap(), "::1/128".parse().unwrap()],
            measurement_allowlist: [Measurement::of(code)].into(),
        }
    }

    /// Provisions a profile for a new agent and returns the agent's runtime
    /// index. The agent keeps only public identifiers.
    async fn provision(
        &mut self,
        agent_id: &str,
        code: &[u8],
        policy: Option<DelegationPolicy>,
    ) -> Result<usize, HarnessError> {
        let measurement = Measurement::of(code);
        let environment_id = format!("vm-{agent_id}");
        let req = ProvisionRequest {
            profile_id: Some(agent_id.to_owned()),
            agent_public_key: SigningKey::generate(&mut OsRng).verifying_key().to_bytes(),
            expected_measurements: BTreeSet::from([measurement]),
            enterprise_namespace: self.namespace.clone(),
            container_fingerprint: Some(Digest32::of(environment_id.as_bytes())),
            deployment_manifest_digest: None,
            initial_policy: policy,
        };
        self.digests.push(admin_request_digest("Provision", &req));
        let resp = self.env.api.provision(req).await;
        self.step("operator", format!("provision {agent_id}"), outcome_of(&resp.clone().map_err(HarnessError::from), "active"));
        let resp = resp?;
        self.runtimes.push(AgentRuntime::new(
            agent_id,
            resp.profile_id,
            resp.imsi.as_str(),
            measurement,
            environment_id,
            self.env.tee.clone(),
            self.env.api.clone(),
            self.env.clock.clone(),
        ));
        Ok(self.runtimes.len() - 1)
    }

    async fn revoke(&mut self, profile_id: &str, reason: &str) -> Result<(), HarnessError> {
        let req = RevokeRequest {
            profile_id: profile_id.to_owned(),
            reason: reason.to_owned(),
        };
        self.digests.push(admin_request_digest(
            "StateChange",
            &LifecycleRequest {
                profile_id: req.profile_id.clone(),
                action: LifecycleAction::Revoke,
                reason: req.reason.clone(),
            },
        ));
        let r = self.env.api.revoke(req).await.map_err(HarnessError::from);
        self.step("operator", format!("revoke {profile_id}"), outcome_of(&r, "revoked"));
        r.map(|_| ())
    }

    async fn send(&mut self, idx: usize, payload: &[u8]) -> Result<SignedAgentMessage, HarnessError> {
        let rt = &mut self.runtimes[idx];
        let actor = rt.agent_id.clone();
        let r = send_signed_message(rt, payload).await;
        self.step(&actor, format!("sign {}", String::from_utf8_lossy(payload)), outcome_of(&r, "signed"));
        r
    }

    async fn verify(&mut self, verifier: &str, msg: &SignedAgentMessage) -> PeerVerification {
        let v = verify_peer_message(msg, self.env.api.as_ref()).await;
        if let Some(d) = v.request_digest {
            self.digests.push(d);
        }
        let outcome = match (&v.valid, &v.reason) {
            (true, _) => "valid".to_owned(),
            (false, Some(r)) => format!("invalid: {r}"),
            (false, None) => "invalid".to_owned(),
        };
        self.step(
            verifier,
            format!("verify message from {}", msg.sender_profile_id),
            outcome,
        );
        v
    }

    async fn authenticate(&mut self, idx: usize) -> Result<AuthSessionResult, HarnessError> {
        let relying = RelyingService::new(self.env.api.clone());
        let rt = &mut self.runtimes[idx];
        let actor = rt.agent_id.clone();
        let r = agent_authenticate(rt, &relying).await;
        let outcome = match &r {
            Ok(s) if s.authenticated => "authenticated".to_owned(),
            Ok(_) => "rejected".to_owned(),
            Err(_) => outcome_of(&r, ""),
        };
        self.step(&actor, "AKA login via relying service", outcome);
        r
    }

    /// Chain verification plus the join of every gateway-bound step against
    /// the audit log on request digest (as a multiset).
    async fn audit_summary(&self) -> Result<AuditSummary, HarnessError> {
        let verify = self.env.api.audit_verify().await?;
        let mut by_digest: HashMap<Digest32, u64> = HashMap::new();
        let mut from = 0;
        loop {
            let page = self.env.api.audit_records(from, 5_000).await?.records;
            if page.is_empty() {
                break;
            }
            from = page.last().unwrap().seq + 1;
            for r in page {
                *by_digest.entry(r.request_digest).or_default() += 1;
            }
        }
        let wanted: Vec<Digest32> = self
            .runtimes
            .iter()
            .flat_map(|rt| rt.transcript.iter().filter_map(|s| s.request_digest))
            .chain(self.digests.iter().copied())
            .collect();
        let mut matched = 0u64;
        for d in &wanted {
            if let Some(n) = by_digest.get_mut(d).filter(|n| **n > 0) {
                *n -= 1;
                matched += 1;
            }
        }
        Ok(AuditSummary {
            chain: verify.verdict,
            records: verify.records,
            transcript_steps: wanted.len() as u64,
            transcript_matched: matched,
            transcript_complete: matched == wanted.len() as u64,
        })
    }
}

const ALERT_CODE: &[u8] = b"alert-agent build 2024.06 (signed release)";
const FINANCE_CODE: &[u8] = b"finance-decision-agent build 3.1.4";
const ROGUE_CODE: &[u8] = b"unreviewed hotfix";

async fn enterprise_alert_agent(run: &mut Run, cfg: &AlertConfig) -> Result<(), HarnessError> {
    let policy = run.policy(
        "alerts-sign-only",
        cfg.rate_limit,
        &[Operation::Sign, Operation::Status],
        ALERT_CODE,
    );
    let agent = run.provision("alert-agent", ALERT_CODE, Some(policy)).await?;

    let mut signed = Vec::new();
    for i in 1..=cfg.sends {
        let payload = format!("ALERT #{i}: anomalous login burst on host db-{i:02}");
        match run.send(agent, payload.as_bytes()).await {
            Ok(m) => {
                run.count("alerts_signed", 1);
                signed.push(m);
            }
            Err(HarnessError::DeniedByGateway(d)) => run.count(&format!("alerts_denied_{}", d.reason), 1),
            Err(e) => return Err(e),
        }
    }
    for m in &signed {
        if run.verify("soc-console", m).await.valid {
            run.count("alerts_verified", 1);
        }
    }

    // Role constraint: this identity may sign, not log in to networks.
    let auth = run.authenticate(agent).await;
    let auth_outcome = outcome_of(&auth, "authenticated");

    // Environment constraint: a build outside the allowlist is refused.
    run.runtimes[agent].swap_code(ROGUE_CODE);
    let rogue = run.send(agent, b"ALERT from modified build").await;
    let rogue_outcome = outcome_of(&rogue, "signed");

    let expected_signed = cfg.sends.min(cfg.rate_limit.n) as u64;
    run.expect("alerts signed", expected_signed, run.get("alerts_signed"));
    run.expect(
        "alerts denied by rate limit",
        cfg.sends as u64 - expected_signed,
        run.get("alerts_denied_RateLimit"),
    );
    run.expect("signed alerts verified by peer", expected_signed, run.get("alerts_verified"));
    run.expect("authenticate outside role", "denied:OpPermission", auth_outcome);
    run.expect("sign from unapproved build", "denied:MeasurementMatch", rogue_outcome);
    Ok(())
}

async fn finance_decision_agent(run: &mut Run, cfg: &FinanceConfig) -> Result<(), HarnessError> {
    let policy = run.policy(
        "finance-trading",
        RateLimit {
            n: cfg.attempts + 10,
            window_seconds: 60,
        },
        &[Operation::Sign, Operation::Authenticate, Operation::Status],
        FINANCE_CODE,
    );
    let agent = run.provision("finance-agent", FINANCE_CODE, Some(policy)).await?;
    let login = run.authenticate(agent).await?;
    run.count("logins_authenticated", login.authenticated as u64);

    let mut signed = Vec::new();
    for i in 1..=cfg.attempts {
        if i == cfg.revoke_after + 1 {
            run.revoke("finance-agent", "revocation drill: suspected credential misuse").await?;
        }
        let payload = format!("DECISION #{i}: rebalance portfolio P-17 by {}bp", i * 5);
        match run.send(agent, payload.as_bytes()).await {
            Ok(m) => {
                run.count("decisions_signed", 1);
                if run.verify("settlement-service", &m).await.valid {
                    run.count("verified_at_signing", 1);
                }
                signed.push(m);
            }
            Err(HarnessError::DeniedByGateway(d)) => {
                run.count(&format!("post_revocation_denied_{}", d.reason), 1)
            }
            Err(e) => return Err(e),
        }
    }
    if cfg.revoke_after == cfg.attempts {
        run.revoke("finance-agent", "revocation drill: end of trading day").await?;
    }
    for m in &signed {
        if run.verify("auditor", m).await.valid {
            run.count("verified_after_revocation", 1);
        }
    }
    let late = run.authenticate(agent).await;
    let late_outcome = outcome_of(&late, "authenticated");

    run.expect("login before revocation", 1, run.get("logins_authenticated"));
    run.expect("decisions signed", cfg.revoke_after, run.get("decisions_signed"));
    run.expect("verified at signing time", cfg.revoke_after, run.get("verified_at_signing"));
    run.expect(
        "post-revocation denials",
        cfg.attempts - cfg.revoke_after,
        run.get("post_revocation_denied_ProfileState"),
    );
    run.expect("verifiable after revocation", 0, run.get("verified_after_revocation"));
    run.expect("login after revocation", "denied:ProfileState", late_outcome);
    Ok(())
}

async fn agent_marketplace(run: &mut Run, cfg: &MarketplaceConfig) -> Result<(), HarnessError> {
    let n = cfg.agents as usize;
    let bad = cfg.compromised as usize;
    let mut agents = Vec::new();
    for i in 0..n {
        let code = format!("market-agent build {i}");
        agents.push(run.provision(&format!("market-agent-{i}"), code.as_bytes(), None).await?);
    }
    for &a in &agents {
        if run.authenticate(a).await?.authenticated {
            run.count("joined_via_aka", 1);
        }
    }

    // Round 1: agents post offers concurrently; each runtime stays on one task.
    let mut tasks = tokio::task::JoinSet::new();
    for (i, mut rt) in std::mem::take(&mut run.runtimes).into_iter().enumerate() {
        tasks.spawn(async move {
            let payload = format!("OFFER r1 from agent {i}: 100 units @ {}", 40 + i);
            let r = send_signed_message(&mut rt, payload.as_bytes()).await;
            (i, rt, payload, r)
        });
    }
    let mut results: Vec<_> = tasks.join_all().await;
    results.sort_by_key(|(i, ..)| *i);
    let mut round1 = Vec::new();
    for (_, rt, payload, r) in results {
        run.step(&rt.agent_id.clone(), format!("sign {payload}"), outcome_of(&r, "signed"));
        run.runtimes.push(rt);
        round1.push(r?);
    }
    for (s, msg) in round1.iter().enumerate() {
        for v in 0..n {
            if v != s && run.verify(&format!("market-agent-{v}"), msg).await.valid {
                run.count("round1_valid_verifications", 1);
            }
        }
    }

    // Compromise: the agent starts running injected code.
    let victim = format!("market-agent-{bad}");
    run.runtimes[agents[bad]].swap_code(b"market agent with injected payload");
    let r = run.send(agents[bad], b"OFFER from compromised agent: 1 unit @ 0").await;
    let compromised_outcome = outcome_of(&r, "signed");
    run.revoke(&victim, "measurement drift detected").await?;

    let mut round2 = Vec::new();
    for (i, &agent) in agents.iter().enumerate() {
        let payload = format!("OFFER r2 from agent {i}");
        if let Ok(m) = run.send(agent, payload.as_bytes()).await {
            round2.push(m);
        }
    }
    let mut verifiable = BTreeSet::new();
    for msg in round2.iter().chain(round1.iter()) {
        let verifier = if msg.sender_profile_id == "market-agent-0" { "market-agent-1" } else { "market-agent-0" };
        if run.verify(verifier, msg).await.valid {
            verifiable.insert(msg.sender_profile_id.clone());
        }
    }
    run.count("verifiable_senders", verifiable.len() as u64);

    run.expect("agents joined via AKA", n, run.get("joined_via_aka"));
    run.expect("round 1 valid verifications", n * (n - 1), run.get("round1_valid_verifications"));
    run.expect("compromised agent signing", "denied:MeasurementMatch", compromised_outcome);
    run.expect("round 2 signed offers", n - 1, round2.len());
    run.expect("senders still verifiable", n - 1, verifiable.len());
    run.expect("revoked sender verifiable", false, verifiable.contains(&victim));
    Ok(())
}

/// Runs a named scenario against `env`. The gateway should be fresh: profile
/// ids are fixed so that reports are reproducible.
pub async fn run_scenario(name: &str, cfg: &ScenarioConfig, env: ScenarioEnv) -> Result<ScenarioReport, HarnessError> {
    execute(name, cfg, env).await.map(|(report, _)| report)
}

async fn execute(
    name: &str,
    cfg: &ScenarioConfig,
    env: ScenarioEnv,
) -> Result<(ScenarioReport, Vec<Vec<u8>>), HarnessError> {
    if !SCENARIOS.contains(&name) {
        return Err(HarnessError::UnknownScenario(name.to_owned()));
    }
    cfg.validate()?;
    let mut run = Run {
        env,
        namespace: cfg.namespace.clone(),
        steps: Vec::new(),
        counts: BTreeMap::new(),
        expectations: Vec::new(),
        digests: Vec::new(),
        runtimes: Vec::new(),
    };
    match name {
        "enterprise-alert-agent" => enterprise_alert_agent(&mut run, &cfg.enterprise_alert_agent).await?,
        "finance-decision-agent" => finance_decision_agent(&mut run, &cfg.finance_decision_agent).await?,
        _ => agent_marketplace(&mut run, &cfg.agent_marketplace).await?,
    }
    let audit = run.audit_summary().await?;
    let passed = run.expectations.iter().all(|e| e.ok) && audit.chain.is_intact() && audit.transcript_complete;
    let snapshots = run.runtimes.iter().map(AgentRuntime::memory_snapshot).collect();
    let report = ScenarioReport {
        scenario: name.to_owned(),
        steps: run.steps,
        counts: run.counts,
        expectations: run.expectations,
        audit,
        passed,
    };
    Ok((report, snapshots))
}

/// Outcome of a scenario on its own throwaway gateway.
pub struct EphemeralRun {
    pub report: ScenarioReport,
    pub gateway: EphemeralGateway,
    /// Serialised state of every agent runtime at the end of the run.
    pub agent_snapshots: Vec<Vec<u8>>,
}

/// Starts a fresh loopback gateway trusting a fresh emulated TEE and runs the
/// scenario over HTTP. The gateway is returned still running. Its state lives
/// in `state_dir` when given (which must not hold a vault yet), otherwise in
/// a temporary directory.
pub async fn run_on_ephemeral_gateway(
    name: &str,
    cfg: &ScenarioConfig,
    state_dir: Option<&Path>,
) -> Result<EphemeralRun, HarnessError> {
    if !SCENARIOS.contains(&name) {
        return Err(HarnessError::UnknownScenario(name.to_owned()));
    }
    cfg.validate()?;
    if let Some(dir) = state_dir {
        if dir.join(agent_esim_core::service::VAULT_FILE).exists() {
            return Err(HarnessError::Config(format!(
                "{} already holds a vault; scenarios need a fresh state directory",
                dir.display()
            )));
        }
    }
    let tee = Arc::new(EmulatedTee::generate("scenario-tee"));
    let gateway = EphemeralGateway::start_with(tee.clone(), |c| {
        if let Some(dir) = state_dir {
            c.state_dir = dir.to_owned();
        }
    })
    .await?;
    let env = ScenarioEnv {
        api: gateway.api(),
        tee,
        clock: Arc::new(SystemClock),
    };
    let (report, agent_snapshots) = execute(name, cfg, env).await?;
    Ok(EphemeralRun {
        report,
        gateway,
        agent_snapshots,
    })
}
