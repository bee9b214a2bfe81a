//! Attestation tokens from (emulated) hardware roots of trust.
//!
//! A token binds a code measurement and an environment id to a validity
//! window, signed with Ed25519 by a registered root. The canonical encoding is
//!
//! ```text
//! "agent-esim-attest/v1"
//! measurement[32] || u32 len || environment_id || issued_at u64 || expires_at u64
//! || nonce[16] || u32 len || root_id                      (signed portion)
//! || signature[64]                                         (full token)
//! ```
//!
//! with big-endian integers and millisecond timestamps. On the wire it travels
//! base64-encoded in the `x-attestation-token` header.

use crate::clock::Timestamp;
use crate::digest::Measurement;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use thiserror::Error;

const DOMAIN: &[u8] = b"agent-esim-attest/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Error)]
pub enum AttestationFailure {
    #[error("no attestation token presented")]
    Missing,
    #[error("attestation token could not be decoded")]
    Malformed,
    #[error("attestation root is not registered")]
    UnknownRoot,
    #[error("attestation signature does not verify")]
    BadSignature,
    #[error("attestation token has expired")]
    Expired,
    #[error("attestation token is not yet valid")]
    NotYetValid,
    #[error("attested measurement is not approved for this profile")]
    MeasurementMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestationClaims {
    pub measurement: Measurement,
    pub environment_id: String,
    pub issued_at: Timestamp,
    pub expires_at: Timestamp,
    pub nonce: [u8; 16],
    pub root_id: String,
}

#[derive(Clone, PartialEq, Eq)]
pub struct AttestationToken {
    pub claims: AttestationClaims,
    pub signature: [u8; 64],
}

impl fmt::Debug for AttestationToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AttestationToken")
            .field("claims", &self.claims)
            .field("signature", &hex::encode(self.signature))
            .finish()
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_be_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.0.len() < n {
            return None;
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Some(head)
    }

    fn array<const N: usize>(&mut self) -> Option<[u8; N]> {
        self.take(N).map(|b| b.try_into().unwrap())
    }

    fn u64(&mut self) -> Option<u64> {
        self.array::<8>().map(u64::from_be_bytes)
    }

    fn string(&mut self) -> Option<String> {
        let len = u32::from_be_bytes(self.array::<4>()?) as usize;
        if len > 1024 {
            return None;
        }
        String::from_utf8(self.take(len)?.to_vec()).ok()
    }
}

impl AttestationClaims {
    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(128);
        out.extend_from_slice(DOMAIN);
        out.extend_from_slice(self.measurement.as_bytes());
        put_str(&mut out, &self.environment_id);
        out.extend_from_slice(&self.issued_at.as_millis().to_be_bytes());
        out.extend_from_slice(&self.expires_at.as_millis().to_be_bytes());
        out.extend_from_slice(&self.nonce);
        put_str(&mut out, &self.root_id);
        out
    }

    pub fn sign(self, root_key: &SigningKey) -> AttestationToken {
        let signature = root_key.sign(&self.signing_bytes()).to_bytes();
        AttestationToken {
            claims: self,
            signature,
        }
    }
}

impl AttestationToken {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.claims.signing_bytes();
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AttestationFailure> {
        let mut r = Reader(bytes);
        let parse = |r: &mut Reader| -> Option<Self> {
            if r.take(DOMAIN.len())? != DOMAIN {
                return None;
            }
            let claims = AttestationClaims {
                measurement: Measurement::from(r.array::<32>()?),
                environment_id: r.string()?,
                issued_at: Timestamp::from_millis(r.u64()?),
                expires_at: Timestamp::from_millis(r.u64()?),
                nonce: r.array::<16>()?,
                root_id: r.string()?,
            };
            let signature = r.array::<64>()?;
            r.0.is_empty().then_some(Self { claims, signature })
        };
        parse(&mut r).ok_or(AttestationFailure::Malformed)
    }

    pub fn to_header(&self) -> String {
        STANDARD.encode(self.to_bytes())
    }

    pub fn from_header(value: &str) -> Result<Self, AttestationFailure> {
        let bytes = STANDARD
            .decode(value.trim())
            .map_err(|_| AttestationFailure::Malformed)?;
        Self::from_bytes(&bytes)
    }
}

impl From<[u8; 32]> for Measurement {
    fn from(b: [u8; 32]) -> Self {
        Self(b)
    }
}

/// What arrived in the attestation header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Presented {
    Absent,
    Malformed,
    Token(AttestationToken),
}

impl Presented {
    pub fn from_header(value: Option<&str>) -> Self {
        match value {
            None => Self::Absent,
            Some(v) => AttestationToken::from_header(v).map_or(Self::Malformed, Self::Token),
        }
    }

    pub fn token(&self) -> Option<&AttestationToken> {
        match self {
            Self::Token(t) => Some(t),
            _ => None,
        }
    }
}

impl From<AttestationToken> for Presented {
    fn from(t: AttestationToken) -> Self {
        Self::Token(t)
    }
}

impl From<Option<AttestationToken>> for Presented {
    fn from(t: Option<AttestationToken>) -> Self {
        t.map_or(Self::Absent, Self::Token)
    }
}

/// Public keys of the roots of trust the gateway accepts.
#[derive(Debug, Clone, Default)]
pub struct RootRegistry {
    roots: HashMap<String, VerifyingKey>,
}

impl RootRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, root_id: impl Into<String>, key: VerifyingKey) {
        self.roots.insert(root_id.into(), key);
    }

    pub fn get(&self, root_id: &str) -> Option<&VerifyingKey> {
        self.roots.get(root_id)
    }

    pub fn len(&self) -> usize {
        self.roots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roots.is_empty()
    }
}

/// Root, signature and validity window. The window is inclusive at both ends.
pub fn verify_envelope(
    token: &AttestationToken,
    roots: &RootRegistry,
    now: Timestamp,
) -> Result<(), AttestationFailure> {
    let key = roots
        .get(&token.claims.root_id)
        .ok_or(AttestationFailure::UnknownRoot)?;
    key.verify_strict(
        &token.claims.signing_bytes(),
        &Signature::from_bytes(&token.signature),
    )
    .map_err(|_| AttestationFailure::BadSignature)?;
    if now > token.claims.expires_at {
        return Err(AttestationFailure::Expired);
    }
    if now < token.claims.issued_at {
        return Err(AttestationFailure::NotYetValid);
    }
    Ok(())
}

/// The measurement must be expected by the binding and allowed by policy.
pub fn measurement_approved(
    measurement: &Measurement,
    expected: &BTreeSet<Measurement>,
    allowlist: &BTreeSet<Measurement>,
) -> bool {
    expected.contains(measurement) && allowlist.contains(measurement)
}

/// Full verification in check order: root, signature, window, measurement.
pub fn verify_attestation(
    token: &AttestationToken,
    expected: &BTreeSet<Measurement>,
    allowlist: &BTreeSet<Measurement>,
    roots: &RootRegistry,
    now: Timestamp,
) -> Result<(), AttestationFailure> {
    verify_envelope(token, roots, now)?;
    if !measurement_approved(&token.claims.measurement, expected, allowlist) {
        return Err(AttestationFailure::MeasurementMismatch);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::OsRng;

    fn claims(now: Timestamp) -> AttestationClaims {
        AttestationClaims {
            measurement: Measurement::of(b"agent build 7"),
            environment_id: "vm-3f2a".into(),
            issued_at: now,
            expires_at: now.plus_secs(300),
            nonce: [9; 16],
            root_id: "tee-root".into(),
        }
    }

    fn setup() -> (SigningKey, RootRegistry, BTreeSet<Measurement>) {
        let key = SigningKey::generate(&mut OsRng);
        let mut roots = RootRegistry::new();
        roots.register("tee-root", key.verifying_key());
        (key, roots, [Measurement::of(b"agent build 7")].into())
    }

    #[test]
    fn valid_token_passes() {
        let (key, roots, m) = setup();
        let now = Timestamp::from_secs(10_000);
        let t = claims(now).sign(&key);
        assert_eq!(verify_attestation(&t, &m, &m, &roots, now), Ok(()));
        assert_eq!(verify_attestation(&t, &m, &m, &roots, now.plus_secs(300)), Ok(()));
    }

    #[test]
    fn window_edges() {
        let (key, roots, m) = setup();
        let now = Timestamp::from_secs(10_000);
        let t = claims(now).sign(&key);
        let expiry = t.claims.expires_at;
        assert_eq!(
            verify_attestation(&t, &m, &m, &roots, expiry.plus_secs(1)),
            Err(AttestationFailure::Expired)
        );
        assert_eq!(
            verify_attestation(&t, &m, &m, &roots, now.minus_secs(1)),
            Err(AttestationFailure::NotYetValid)
        );
    }

    #[test]
    fn unregistered_signer_is_unknown_root() {
        let (_, roots, m) = setup();
        let rogue = SigningKey::generate(&mut OsRng);
        let now = Timestamp::from_secs(10_000);
        let mut c = claims(now);
        c.root_id = "rogue".into();
        let t = c.sign(&rogue);
        assert_eq!(verify_attestation(&t, &m, &m, &roots, now), Err(AttestationFailure::UnknownRoot));
    }

    #[test]
    fn resigned_by_other_key_is_bad_signature() {
        let (_, roots, m) = setup();
        let rogue = SigningKey::generate(&mut OsRng);
        let now = Timestamp::from_secs(10_000);
        let t = claims(now).sign(&rogue);
        assert_eq!(verify_attestation(&t, &m, &m, &roots, now), Err(AttestationFailure::BadSignature));
    }

    #[test]
    fn measurement_needs_binding_and_allowlist() {
        let (key, roots, m) = setup();
        let now = Timestamp::from_secs(10_000);
        let t = claims(now).sign(&key);
        let empty = BTreeSet::new();
        assert_eq!(
            verify_attestation(&t, &m, &empty, &roots, now),
            Err(AttestationFailure::MeasurementMismatch)
        );
        assert_eq!(
            verify_attestation(&t, &empty, &m, &roots, now),
            Err(AttestationFailure::MeasurementMismatch)
        );
    }

    #[test]
    fn garbage_headers_are_malformed() {
        assert_eq!(AttestationToken::from_header("!!!").unwrap_err(), AttestationFailure::Malformed);
        assert_eq!(
            AttestationToken::from_header(&STANDARD.encode(b"agent-esim-attest/v1 short")).unwrap_err(),
            AttestationFailure::Malformed
        );
    }

    proptest! {
        #[test]
        fn header_roundtrip(m in any::<[u8; 32]>(), env in "[a-z0-9-]{0,40}", issued in 0u64..1u64 << 50,
                            ttl in 0u64..1u64 << 20, nonce in any::<[u8; 16]>(), root in "[a-z-]{1,20}",
                            sig in prop::collection::vec(any::<u8>(), 64)) {
            let token = AttestationToken {
                claims: AttestationClaims {
                    measurement: Measurement::from(m),
                    environment_id: env,
                    issued_at: Timestamp::from_millis(issued),
                    expires_at: Timestamp::from_millis(issued + ttl),
                    nonce,
                    root_id: root,
                },
                signature: sig.try_into().unwrap(),
            };
            prop_assert_eq!(AttestationToken::from_header(&token.to_header()).unwrap(), token);
        }
    }
}
