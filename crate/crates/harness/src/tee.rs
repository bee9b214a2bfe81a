use agent_esim_core::attestation::{AttestationClaims, AttestationToken};
use agent_esim_core::clock::Timestamp;
use agent_esim_core::config::RootConfig;
use agent_esim_core::digest::Measurement;
use ed25519_dalek::SigningKey;
use rand::rngs::OsRng;
use rand::RngCore;
use std::fmt;

/// Software stand-in for a hardware root of trust. It signs whatever
/// measurement the runtime reports; "compromise" means the runtime now runs
/// different code and so reports a different measurement.
pub struct EmulatedTee {
    root_id: String,
    key: SigningKey,
}

impl fmt::Debug for EmulatedTee {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EmulatedTee").field("root_id", &self.root_id).finish_non_exhaustive()
    }
}

impl EmulatedTee {
    pub fn generate(root_id: impl Into<String>) -> Self {
        Self {
            root_id: root_id.into(),
            key: SigningKey::generate(&mut OsRng),
        }
    }

    pub fn root_id(&self) -> &str {
        &self.root_id
    }

    pub fn public_key(&self) -> [u8; 32] {
        self.key.verifying_key().to_bytes()
    }

    /// The entry a gateway config needs to trust this root.
    pub fn root_config(&self) -> RootConfig {
        RootConfig {
            root_id: self.root_id.clone(),
            public_key: hex::encode(self.public_key()),
        }
    }

    pub fn attest(&self, measurement: Measurement, environment_id: &str, now: Timestamp, ttl_secs: u64) -> AttestationToken {
        let mut nonce = [0u8; 16];
        OsRng.fill_bytes(&mut nonce);
        AttestationClaims {
            measurement,
            environment_id: environment_id.to_owned(),
            issued_at: now,
            expires_at: now.plus_secs(ttl_secs),
            nonce,
            root_id: self.root_id.clone(),
        }
        .sign(&self.key)
    }
}
