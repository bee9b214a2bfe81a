//! Service configuration (TOML).
//!
//! ```toml
//! listen_addr = "127.0.0.1:7400"
//! state_dir = "./agent-esim-state"
//! admin_credential = "change-me"      # or AGENT_ESIM_ADMIN_TOKEN
//! imsi_prefix = "00101"               # MCC + MNC
//! iccid_prefix = "8900101"
//! challenge_ttl_seconds = 60
//! sqn_step = 1
//!
//! [[attestation_roots]]
//! root_id = "tee-root-1"
//! public_key = "<32-byte Ed25519 key, hex>"
//!
//! [default_policy]
//! rate_limit = { n = 10, window_seconds = 60 }
//! lifetime_seconds = 86400
//! allowed_ops = ["Sign", "Authenticate", "Status"]
//! cidr_allowlist = []
//! ```

use crate::attestation::RootRegistry;
use crate::clock::Timestamp;
use crate::digest::Measurement;
use crate::ids::IdAllocator;
use crate::network::NetworkSettings;
use crate::policy::{DelegationPolicy, Operation, RateLimit, Validity};
use ed25519_dalek::VerifyingKey;
use ipnet::IpNet;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const ADMIN_TOKEN_ENV: &str = "AGENT_ESIM_ADMIN_TOKEN";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("config key `{key}`: {message}")]
    Invalid { key: String, message: String },
}

fn invalid(key: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RootConfig {
    pub root_id: String,
    pub public_key: String,
}

/// Template from which each new profile's initial policy is cut.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefaultPolicy {
    #[serde(default = "default_rate")]
    pub rate_limit: RateLimit,
    #[serde(default = "default_lifetime")]
    pub lifetime_seconds: u64,
    #[serde(default = "all_ops")]
    pub allowed_ops: BTreeSet<Operation>,
    #[serde(default)]
    pub cidr_allowlist: Vec<IpNet>,
}

fn default_rate() -> RateLimit {
    RateLimit {
        n: 10,
        window_seconds: 60,
    }
}

fn default_lifetime() -> u64 {
    365 * 24 * 3600
}

fn all_ops() -> BTreeSet<Operation> {
    [Operation::Sign, Operation::Authenticate, Operation::Status].into()
}

impl Default for DefaultPolicy {
    fn default() -> Self {
        Self {
            rate_limit: default_rate(),
            lifetime_seconds: default_lifetime(),
            allowed_ops: all_ops(),
            cidr_allowlist: Vec::new(),
        }
    }
}

impl DefaultPolicy {
    /// The measurement allowlist starts as the profile's expected measurements.
    pub fn instantiate(
        &self,
        policy_id: String,
        now: Timestamp,
        measurements: &BTreeSet<Measurement>,
    ) -> DelegationPolicy {
        DelegationPolicy {
            policy_id,
            rate_limit: self.rate_limit,
            validity: Validity {
                not_before: now,
                not_after: now.plus_secs(self.lifetime_seconds),
            },
            allowed_ops: self.allowed_ops.clone(),
            cidr_allowlist: self.cidr_allowlist.clone(),
            measurement_allowlist: measurements.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default = "default_listen")]
    pub listen_addr: SocketAddr,
    #[serde(default = "default_state_dir")]
    pub state_dir: PathBuf,
    #[serde(default)]
    pub admin_credential: Option<String>,
    #[serde(default = "default_imsi_prefix")]
    pub imsi_prefix: String,
    #[serde(default = "default_iccid_prefix")]
    pub iccid_prefix: String,
    #[serde(default = "default_ttl")]
    pub challenge_ttl_seconds: u64,
    #[serde(default = "default_step")]
    pub sqn_step: u64,
    #[serde(default)]
    pub attestation_roots: Vec<RootConfig>,
    #[serde(default)]
    pub default_policy: DefaultPolicy,
}

fn default_listen() -> SocketAddr {
    "127.0.0.1:7400".parse().unwrap()
}

fn default_state_dir() -> PathBuf {
    PathBuf::from("agent-esim-state")
}

fn default_imsi_prefix() -> String {
    "00101".into()
}

fn default_iccid_prefix() -> String {
    "8900101".into()
}

fn default_ttl() -> u64 {
    60
}

fn default_step() -> u64 {
    1
}

impl Default for Config {
    fn default() -> Self {
        Self {
            listen_addr: default_listen(),
            state_dir: default_state_dir(),
            admin_credential: None,
            imsi_prefix: default_imsi_prefix(),
            iccid_prefix: default_iccid_prefix(),
            challenge_ttl_seconds: default_ttl(),
            sqn_step: default_step(),
            attestation_roots: Vec::new(),
            default_policy: DefaultPolicy::default(),
        }
    }
}

impl Config {
    /// Reads `path`, then lets the environment supply the admin credential.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.to_owned(),
                message,
            },
            other => other,
        })?;
        cfg.apply_env();
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::from("<inline>"),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) {
        if let Ok(token) = std::env::var(ADMIN_TOKEN_ENV) {
            if !token.is_empty() {
                self.admin_credential = Some(token);
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.allocator()?;
        self.roots()?;
        if self.sqn_step == 0 {
            return Err(invalid("sqn_step", "must be at least 1"));
        }
        if self.challenge_ttl_seconds == 0 {
            return Err(invalid("challenge_ttl_seconds", "must be at least 1"));
        }
        if let Some(c) = &self.admin_credential {
            if c.len() < 8 {
                return Err(invalid("admin_credential", "must be at least 8 characters"));
            }
        }
        let dp = &self.default_policy;
        if dp.allowed_ops.is_empty() {
            return Err(invalid("default_policy.allowed_ops", "must not be empty"));
        }
        if dp.lifetime_seconds == 0 {
            return Err(invalid("default_policy.lifetime_seconds", "must be positive"));
        }
        if dp.rate_limit.window_seconds == 0 {
            return Err(invalid("default_policy.rate_limit.window_seconds", "must be positive"));
        }
        Ok(())
    }

    pub fn allocator(&self) -> Result<IdAllocator, ConfigError> {
        IdAllocator::new(&self.imsi_prefix, &self.iccid_prefix).map_err(|e| {
            let key = match e {
                crate::ids::IdError::IccidPrefix => "iccid_prefix",
                _ => "imsi_prefix",
            };
            invalid(key, e.to_string())
        })
    }

    pub fn roots(&self) -> Result<RootRegistry, ConfigError> {
        let mut reg = RootRegistry::new();
        for (i, r) in self.attestation_roots.iter().enumerate() {
            let key = format!("attestation_roots[{i}].public_key");
            let bytes: [u8; 32] = crate::hexfmt::decode(&r.public_key).map_err(|m| invalid(&key, m))?;
            let vk = VerifyingKey::from_bytes(&bytes).map_err(|_| invalid(&key, "not an Ed25519 public key"))?;
            if r.root_id.is_empty() {
                return Err(invalid(format!("attestation_roots[{i}].root_id"), "must not be empty"));
            }
            reg.register(r.root_id.clone(), vk);
        }
        Ok(reg)
    }

    pub fn network_settings(&self) -> NetworkSettings {
        NetworkSettings {
            sqn_step: self.sqn_step,
            challenge_ttl_secs: self.challenge_ttl_seconds,
            ..NetworkSettings::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = Config::from_toml("").unwrap();
        assert_eq!(cfg, Config::default());
        assert_eq!(cfg.challenge_ttl_seconds, 60);
        assert_eq!(cfg.sqn_step, 1);
    }

    #[test]
    fn full_file_parses() {
        let key = hex::encode(ed25519_dalek::SigningKey::from_bytes(&[7; 32]).verifying_key().to_bytes());
        let text = format!(
            r#"
listen_addr = "0.0.0.0:9000"
state_dir = "/tmp/x"
admin_credential = "s3cret-token"
imsi_prefix = "310260"
iccid_prefix = "8901260"

[[attestation_roots]]
root_id = "tee"
public_key = "{key}"

[default_policy]
rate_limit = {{ n = 3, window_seconds = 10 }}
allowed_ops = ["Sign"]
cidr_allowlist = ["10.0.0.0/8"]
"#
        );
        let cfg = Config::from_toml(&text).unwrap();
        assert_eq!(cfg.roots().unwrap().len(), 1);
        assert_eq!(cfg.default_policy.rate_limit.n, 3);
        assert_eq!(cfg.allocator().unwrap().plmn(), "310260");
    }

    #[test]
    fn unknown_key_is_named() {
        let err = Config::from_toml("listen_adress = \"1.2.3.4:5\"").unwrap_err().to_string();
        assert!(err.contains("listen_adress"), "{err}");
    }

    #[test]
    fn bad_values_are_named() {
        let err = Config::from_toml("imsi_prefix = \"12\"").unwrap_err().to_string();
        assert!(err.contains("imsi_prefix"), "{err}");
        let err = Config::from_toml("[[attestation_roots]]\nroot_id = \"r\"\npublic_key = \"zz\"")
            .unwrap_err()
            .to_string();
        assert!(err.contains("attestation_roots[0].public_key"), "{err}");
        let err = Config::from_toml("sqn_step = 0").unwrap_err().to_string();
        assert!(err.contains("sqn_step"), "{err}");
    }
}
