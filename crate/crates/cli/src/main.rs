//! `agent-esim`: operator command line.
//!
//! Admin commands talk to a running gateway when `--gateway` is given (the
//! admin credential comes from the environment), and otherwise open the state
//! directory directly. Direct mode takes the directory's exclusive lock, so it
//! refuses to run while `serve` owns the same directory.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage or configuration error.

use agent_esim_client::HttpClient;
use agent_esim_core::audit::{verify_audit_file, ChainVerdict};
use agent_esim_core::clock::SystemClock;
use agent_esim_core::config::{Config, ADMIN_TOKEN_ENV};
use agent_esim_core::digest::{Digest32, Measurement};
use agent_esim_core::policy::DelegationPolicy;
use agent_esim_core::service::{IdentityService, AUDIT_FILE};
use agent_esim_core::wire::*;
use agent_esim_core::TelcoApi;
use agent_esim_harness::{run_on_ephemeral_gateway, ScenarioConfig, ScenarioReport, SCENARIOS};
use agent_esim_server::InProcess;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::collections::BTreeSet;
use std::fmt::Display;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

#[derive(Debug, Parser)]
#[command(name = "agent-esim", version, about = "Telco-hosted identity for AI agents")]
struct Cli {
    /// Service configuration (TOML).
    #[arg(long, global = true, env = "AGENT_ESIM_CONFIG")]
    config: Option<PathBuf>,
    /// State directory; overrides the configured one.
    #[arg(long, global = true)]
    state_dir: Option<PathBuf>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    json: bool,
    /// Base URL of a running gateway, e.g. http://127.0.0.1:7400.
    #[arg(long, global = true, env = "AGENT_ESIM_GATEWAY")]
    gateway: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run vault, network core and gateway in one process.
    Serve {
        /// Listen address; overrides the configured one.
        #[arg(long)]
        listen: Option<SocketAddr>,
    },
    /// Issue a SIM profile to an agent.
    Provision(ProvisionArgs),
    /// Suspend an active profile.
    Suspend(LifecycleArgs),
    /// Resume a suspended profile.
    Resume(LifecycleArgs),
    /// Permanently revoke a profile.
    Revoke {
        profile_id: String,
        #[arg(long)]
        reason: String,
    },
    /// Show a profile's delegation policy, or replace it with `--file`.
    Policy {
        profile_id: String,
        /// New policy (JSON, or TOML for any other extension).
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Show a profile's public status.
    Status { profile_id: String },
    /// Verify an audit log file, or the live chain of the gateway or state directory.
    AuditVerify { path: Option<PathBuf> },
    /// Run a built-in scenario on a throwaway loopback gateway. With
    /// `--state-dir` the gateway's state is kept there for inspection.
    Scenario {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(SCENARIOS))]
        name: String,
        /// Scenario parameters (TOML).
        #[arg(long)]
        scenario_config: Option<PathBuf>,
        /// Also write the report as JSON to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct ProvisionArgs {
    /// Agent's Ed25519 public key, hex.
    #[arg(long)]
    agent_public_key: String,
    /// Approved code measurement (SHA-256, hex). Repeatable.
    #[arg(long = "measurement")]
    measurements: Vec<String>,
    /// Approve the SHA-256 of this file's contents. Repeatable.
    #[arg(long = "measure-file")]
    measure_files: Vec<PathBuf>,
    #[arg(long)]
    namespace: String,
    /// Requested profile id; generated when absent.
    #[arg(long)]
    profile_id: Option<String>,
    /// Container or VM fingerprint (SHA-256, hex).
    #[arg(long)]
    container_fingerprint: Option<String>,
    /// Digest of the signed deployment manifest (SHA-256, hex).
    #[arg(long)]
    manifest_digest: Option<String>,
    /// Initial policy (JSON or TOML); the configured default otherwise.
    #[arg(long)]
    policy: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct LifecycleArgs {
    profile_id: String,
    #[arg(long, default_value = "")]
    reason: String,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(m: impl Display) -> Self {
        Self { code: 2, message: m.to_string() }
    }

    fn domain(m: impl Display) -> Self {
        Self { code: 1, message: m.to_string() }
    }
}

impl From<ApiError> for Failure {
    fn from(e: ApiError) -> Self {
        match e.denial() {
            Some(d) => Self::domain(format!("denied: {d}")),
            None => Self::domain(e),
        }
    }
}

type Outcome = Result<(), Failure>;

struct Ctx {
    config_path: Option<PathBuf>,
    state_dir: Option<PathBuf>,
    json: bool,
    gateway: Option<String>,
}

impl Ctx {
    fn config(&self) -> Result<Config, Failure> {
        let mut cfg = match &self.config_path {
            Some(p) => Config::load(p).map_err(Failure::usage)?,
            None => {
                let mut c = Config::default();
                c.apply_env();
                c
            }
        };
        if let Some(d) = &self.state_dir {
            cfg.state_dir = d.clone();
        }
        cfg.validate().map_err(Failure::usage)?;
        Ok(cfg)
    }

    fn api(&self) -> Result<Arc<dyn TelcoApi>, Failure> {
        if let Some(url) = &self.gateway {
            let mut client = HttpClient::new(url.trim_end_matches('/'));
            if let Ok(token) = std::env::var(ADMIN_TOKEN_ENV) {
                client = client.with_admin_credential(token);
            }
            return Ok(Arc::new(client));
        }
        let cfg = self.config()?;
        let svc = IdentityService::open(&cfg, Arc::new(SystemClock)).map_err(Failure::domain)?;
        Ok(Arc::new(InProcess::new(Arc::new(svc))))
    }

    /// JSON, or the human lines.
    /// A closed stdout (e.g. piped into `head`) is not an error.
    fn emit<T: Serialize>(&self, value: &T, lines: impl IntoIterator<Item = String>) {
        let mut out = std::io::stdout().lock();
        if self.json {
            let _ = writeln!(out, "{}", serde_json::to_string_pretty(value).expect("output serializes"));
        } else {
            for l in lines {
                if writeln!(out, "{l}").is_err() {
                    return;
                }
            }
        }
    }
}

fn digest_arg(flag: &str, hex_str: &str) -> Result<Digest32, Failure> {
    Digest32::from_hex(hex_str).map_err(|e| Failure::usage(format!("--{flag}: {e}")))
}

fn read_policy(path: &Path) -> Result<DelegationPolicy, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

async fn provision(ctx: &Ctx, a: ProvisionArgs) -> Outcome {
    let key: [u8; 32] = hex::decode(&a.agent_public_key)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| Failure::usage("--agent-public-key: expected 64 hex digits"))?;
    let mut measurements = BTreeSet::new();
    for m in &a.measurements {
        measurements.insert(digest_arg("measurement", m)?);
    }
    for f in &a.measure_files {
        let bytes = std::fs::read(f).map_err(|e| Failure::usage(format!("{}: {e}", f.display())))?;
        measurements.insert(Measurement::of(&bytes));
    }
    let req = ProvisionRequest {
        profile_id: a.profile_id,
        agent_public_key: key,
        expected_measurements: measurements,
        enterprise_namespace: a.namespace,
        container_fingerprint: a.container_fingerprint.map(|h| digest_arg("container-fingerprint", &h)).transpose()?,
        deployment_manifest_digest: a.manifest_digest.map(|h| digest_arg("manifest-digest", &h)).transpose()?,
        initial_policy: a.policy.as_deref().map(read_policy).transpose()?,
    };
    let r = ctx.api()?.provision(req).await?;
    ctx.emit(
        &r,
        [
            format!("profile_id  {}", r.profile_id),
            format!("imsi        {}", r.imsi),
            format!("iccid       {}", r.iccid),
            format!("public_key  {}", hex::encode(r.public_key)),
            format!("state       {}", r.state),
            format!("policy_id   {}", r.policy_id),
            format!("audit_seq   {}", r.audit_seq),
        ],
    );
    Ok(())
}

async fn lifecycle(ctx: &Ctx, profile_id: String, action: LifecycleAction, reason: String) -> Outcome {
    let api = ctx.api()?;
    let r = match action {
        LifecycleAction::Revoke => api.revoke(RevokeRequest { profile_id, reason }).await?,
        _ => api.lifecycle(LifecycleRequest { profile_id, action, reason }).await?,
    };
    ctx.emit(
        &r,
        [format!("{}: {} -> {} (audit seq {})", r.profile_id, r.previous_state, r.state, r.audit_seq)],
    );
    Ok(())
}

fn policy_lines(p: &DelegationPolicy) -> Vec<String> {
    let ops: Vec<_> = p.allowed_ops.iter().map(|o| o.to_string()).collect();
    let cidrs: Vec<_> = p.cidr_allowlist.iter().map(|c| c.to_string()).collect();
    vec![
        format!("policy_id     {}", p.policy_id),
        format!("rate_limit    {} per {} s", p.rate_limit.n, p.rate_limit.window_seconds),
        format!("validity      {} .. {}", p.validity.not_before, p.validity.not_after),
        format!("allowed_ops   {}", ops.join(", ")),
        format!("cidr          {}", if cidrs.is_empty() { "any".into() } else { cidrs.join(", ") }),
        format!("measurements  {}", p.measurement_allowlist.len()),
    ]
}

async fn policy(ctx: &Ctx, profile_id: String, file: Option<PathBuf>) -> Outcome {
    let api = ctx.api()?;
    match file {
        Some(path) => {
            let policy = read_policy(&path)?;
            let r = api.update_policy(PolicyUpdateRequest { profile_id, policy }).await?;
            ctx.emit(
                &r,
                [format!(
                    "{}: policy {} -> {} (audit seq {})",
                    r.profile_id, r.previous_policy_id, r.policy_id, r.audit_seq
                )],
            );
        }
        None => {
            let r = api.status(&profile_id, None).await?;
            ctx.emit(&r.policy, policy_lines(&r.policy));
        }
    }
    Ok(())
}

async fn status(ctx: &Ctx, profile_id: String) -> Outcome {
    let r = ctx.api()?.status(&profile_id, None).await?;
    let p = &r.profile;
    let mut lines = vec![
        format!("profile_id    {}", p.profile_id),
        format!("state         {}", p.state),
        format!("bound         {}", r.bound),
        format!("imsi          {}", p.imsi),
        format!("iccid         {}", p.iccid),
        format!("public_key    {}", hex::encode(p.public_key)),
        format!("namespace     {}", p.binding.enterprise_namespace),
        format!("rate_headroom {}", r.rate_headroom),
    ];
    lines.extend(policy_lines(&r.policy));
    ctx.emit(&r, lines);
    Ok(())
}

#[derive(Serialize)]
struct VerifyOutput {
    source: String,
    #[serde(flatten)]
    verdict: ChainVerdict,
    records: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    truncated_tail: Option<bool>,
}

async fn audit_verify(ctx: &Ctx, path: Option<PathBuf>) -> Outcome {
    let out = match (path, &ctx.gateway) {
        (None, Some(url)) => {
            let r = ctx.api()?.audit_verify().await?;
            VerifyOutput { source: url.clone(), verdict: r.verdict, records: r.records, truncated_tail: None }
        }
        (path, _) => {
            let path = match path {
                Some(p) => p,
                None => ctx.config()?.state_dir.join(AUDIT_FILE),
            };
            let v = verify_audit_file(&path).map_err(|e| Failure::domain(format!("{}: {e}", path.display())))?;
            VerifyOutput {
                source: path.display().to_string(),
                verdict: v.verdict,
                records: v.records,
                truncated_tail: Some(v.truncated_tail),
            }
        }
    };
    let mut lines = vec![match out.verdict {
        ChainVerdict::Intact { .. } => format!("{}: {}", out.source, out.verdict),
        ChainVerdict::Broken { .. } => format!("{}: {} of {} records", out.source, out.verdict, out.records),
    }];
    if out.truncated_tail == Some(true) {
        lines.push("note: a partial trailing record was ignored".into());
    }
    ctx.emit(&out, lines);
    match out.verdict {
        ChainVerdict::Intact { .. } => Ok(()),
        ChainVerdict::Broken { first_bad_seq } => {
            Err(Failure::domain(format!("audit chain broken at seq {first_bad_seq}")))
        }
    }
}

fn report_lines(r: &ScenarioReport) -> Vec<String> {
    let mut lines = vec![format!("scenario {}", r.scenario)];
    for s in &r.steps {
        lines.push(format!("{:>3}. {:<20} {:<60} {}", s.n, s.actor, s.action, s.outcome));
    }
    for e in &r.expectations {
        let mark = if e.ok { "ok  " } else { "FAIL" };
        lines.push(format!("[{mark}] {}: expected {}, got {}", e.check, e.expected, e.actual));
    }
    lines.push(format!(
        "audit: {} ({} records), transcript {}/{} steps matched",
        r.audit.chain, r.audit.records, r.audit.transcript_matched, r.audit.transcript_steps
    ));
    lines.push(if r.passed { "PASSED".into() } else { "FAILED".into() });
    lines
}

async fn scenario(ctx: &Ctx, name: String, cfg: Option<PathBuf>, report: Option<PathBuf>) -> Outcome {
    let cfg = match cfg {
        Some(p) => ScenarioConfig::load(&p).map_err(Failure::usage)?,
        None => ScenarioConfig::default(),
    };
    let run = run_on_ephemeral_gateway(&name, &cfg, ctx.state_dir.as_deref()).await.map_err(|e| match e {
        agent_esim_harness::HarnessError::Config(_) => Failure::usage(e),
        e => Failure::domain(e),
    })?;
    let _ = run.gateway.shutdown().await;
    let r = run.report;
    if let Some(path) = report {
        let body = serde_json::to_vec_pretty(&r).expect("report serializes");
        std::fs::write(&path, body).map_err(|e| Failure::domain(format!("{}: {e}", path.display())))?;
    }
    ctx.emit(&r, report_lines(&r));
    if r.passed {
        Ok(())
    } else {
        Err(Failure::domain(format!("scenario {name} failed")))
    }
}

async fn serve(ctx: &Ctx, listen: Option<SocketAddr>) -> Outcome {
    let mut cfg = ctx.config()?;
    if let Some(l) = listen {
        cfg.listen_addr = l;
    }
    if cfg.admin_credential.is_none() {
        return Err(Failure::usage(format!(
            "no admin credential: set {ADMIN_TOKEN_ENV} or admin_credential in the config"
        )));
    }
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let server = agent_esim_server::start(&cfg, Arc::new(SystemClock))
        .await
        .map_err(Failure::domain)?;
    let ready = serde_json::json!({ "listening": server.base_url(), "state_dir": cfg.state_dir });
    ctx.emit(&ready, [format!("listening on {} (state in {})", server.base_url(), cfg.state_dir.display())]);
    shutdown_signal().await;
    server.shutdown().await.map_err(Failure::domain)?;
    Ok(())
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).expect("SIGTERM handler installs");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    let _ = tokio::signal::ctrl_c().await;
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = Ctx {
        config_path: cli.config,
        state_dir: cli.state_dir,
        json: cli.json,
        gateway: cli.gateway,
    };
    let result = match cli.command {
        Command::Serve { listen } => serve(&ctx, listen).await,
        Command::Provision(a) => provision(&ctx, a).await,
        Command::Suspend(a) => lifecycle(&ctx, a.profile_id, LifecycleAction::Suspend, a.reason).await,
        Command::Resume(a) => lifecycle(&ctx, a.profile_id, LifecycleAction::Resume, a.reason).await,
        Command::Revoke { profile_id, reason } => lifecycle(&ctx, profile_id, LifecycleAction::Revoke, reason).await,
        Command::Policy { profile_id, file } => policy(&ctx, profile_id, file).await,
        Command::Status { profile_id } => status(&ctx, profile_id).await,
        Command::AuditVerify { path } => audit_verify(&ctx, path).await,
        Command::Scenario { name, scenario_config, report } => scenario(&ctx, name, scenario_config, report).await,
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("agent-esim: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
