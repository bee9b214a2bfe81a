//! Key-isolation scanning: does a byte stream contain any provisioned secret,
//! raw or in one of the text encodings used on the wire?

use agent_esim_core::vault::{read_state_file, VaultError};
use base64::engine::general_purpose::{STANDARD, URL_SAFE_NO_PAD};
use base64::Engine;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

#[derive(Debug, Default, Clone)]
pub struct SecretScanner {
    /// needle length -> needle -> label of the secret it encodes
    needles: BTreeMap<usize, HashMap<Vec<u8>, String>>,
    secrets: usize,
}

impl SecretScanner {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every Ki, OPc, OP and profile signing key in a vault state file.
    pub fn from_vault_file(path: impl AsRef<Path>) -> Result<Self, VaultError> {
        let mut s = Self::new();
        for p in read_state_file(path)? {
            let id = p.profile_id.as_str();
            let km = p.key_material();
            s.add(format!("{id}/ki"), km.expose_k());
            s.add(format!("{id}/opc"), km.expose_opc());
            if let Some(op) = km.expose_op() {
                s.add(format!("{id}/op"), op);
            }
            s.add(format!("{id}/signing-key"), &p.expose_signing_key());
        }
        Ok(s)
    }

    pub fn add(&mut self, label: impl Into<String>, secret: &[u8]) {
        let label = label.into();
        let encodings = [
            secret.to_vec(),
            hex::encode(secret).into_bytes(),
            hex::encode_upper(secret).into_bytes(),
            STANDARD.encode(secret).into_bytes(),
            URL_SAFE_NO_PAD.encode(secret).into_bytes(),
        ];
        for e in encodings {
            self.needles.entry(e.len()).or_default().insert(e, label.clone());
        }
        self.secrets += 1;
    }

    pub fn secret_count(&self) -> usize {
        self.secrets
    }

    /// Labels of every secret found in `haystack`.
    pub fn scan(&self, haystack: &[u8]) -> Vec<String> {
        let mut found = HashSet::new();
        for (&len, table) in &self.needles {
            if len == 0 || haystack.len() < len {
                continue;
            }
            for w in haystack.windows(len) {
                if let Some(label) = table.get(w) {
                    found.insert(label.clone());
                }
            }
        }
        let mut v: Vec<_> = found.into_iter().collect();
        v.sort();
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_every_encoding() {
        let secret = [0xabu8; 16];
        let mut s = SecretScanner::new();
        s.add("k", &secret);
        assert!(s.scan(b"nothing to see").is_empty());
        for hay in [
            [b"x".as_slice(), &secret, b"y"].concat(),
            format!("{{\"v\":\"{}\"}}", hex::encode(secret)).into_bytes(),
            format!("..{}..", hex::encode_upper(secret)).into_bytes(),
            STANDARD.encode(secret).into_bytes(),
        ] {
            assert_eq!(s.scan(&hay), vec!["k".to_owned()]);
        }
    }
}
