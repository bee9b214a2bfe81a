use crate::agent::HarnessError;
use crate::isolation::SecretScanner;
use crate::tee::EmulatedTee;
use agent_esim_client::{HttpClient, WireTap};
use agent_esim_core::clock::SystemClock;
use agent_esim_core::config::Config;
use agent_esim_core::service::VAULT_FILE;
use agent_esim_core::TelcoApi;
use agent_esim_server::RunningServer;
use rand::rngs::OsRng;
use rand::RngCore;
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// A throwaway gateway on a loopback port with its own state directory,
/// trusting one emulated TEE root. Clients made by it record their traffic.
pub struct EphemeralGateway {
    pub server: RunningServer,
    pub tee: Arc<EmulatedTee>,
    pub tap: WireTap,
    admin_credential: String,
    state_dir: PathBuf,
    _scratch: tempfile::TempDir,
}

impl EphemeralGateway {
    pub async fn start(tee: Arc<EmulatedTee>) -> Result<Self, HarnessError> {
        Self::start_with(tee, |_| {}).await
    }

    pub async fn start_with(tee: Arc<EmulatedTee>, tweak: impl FnOnce(&mut Config)) -> Result<Self, HarnessError> {
        let dir = tempfile::tempdir().map_err(|e| HarnessError::Setup(e.to_string()))?;
        let mut secret = [0u8; 24];
        OsRng.fill_bytes(&mut secret);
        let admin_credential = hex::encode(secret);
        let mut config = Config {
            listen_addr: "127.0.0.1:0".parse().unwrap(),
            state_dir: dir.path().to_owned(),
            admin_credential: Some(admin_credential.clone()),
            attestation_roots: vec![tee.root_config()],
            ..Config::default()
        };
        tweak(&mut config);
        let state_dir = config.state_dir.clone();
        let server = agent_esim_server::start(&config, Arc::new(SystemClock))
            .await
            .map_err(|e| HarnessError::Setup(e.to_string()))?;
        Ok(Self {
            server,
            tee,
            tap: WireTap::new(),
            admin_credential,
            state_dir,
            _scratch: dir,
        })
    }

    pub fn client(&self) -> HttpClient {
        HttpClient::new(self.server.base_url())
            .with_admin_credential(self.admin_credential.clone())
            .with_tap(self.tap.clone())
    }

    pub fn api(&self) -> Arc<dyn TelcoApi> {
        Arc::new(self.client())
    }

    pub fn admin_credential(&self) -> &str {
        &self.admin_credential
    }

    pub fn state_dir(&self) -> &Path {
        &self.state_dir
    }

    /// Scanner loaded with every secret the gateway has provisioned so far.
    pub fn scanner(&self) -> SecretScanner {
        SecretScanner::from_vault_file(self.state_dir.join(VAULT_FILE)).expect("vault file readable")
    }

    pub async fn shutdown(self) -> std::io::Result<()> {
        self.server.shutdown().await
    }
}
