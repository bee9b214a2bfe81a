//! Home-network authentication authority.
//!
//! Holds the subscriber table (key material, SQN_HE, AMF), issues
//! authentication challenges, confirms RES values and processes AUTS
//! resynchronisation. Key material is not persisted here: on restart the
//! table is rebuilt from the vault state file, the operator's single at-rest
//! secret store. What this module persists (`network.json`) is SQN_HE, AMF and
//! the pending-challenge table.

use crate::aka::{self, Auts, MilenageKeyMaterial, SQN_MAX};
use crate::clock::{Clock, Timestamp};
use crate::hexfmt;
use crate::ids::Imsi;
use parking_lot::{Mutex, RwLock};
use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use subtle::ConstantTimeEq;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetworkError {
    #[error("subscriber already registered")]
    DuplicateSubscriber,
    #[error("IMSI must be exactly 15 decimal digits")]
    InvalidImsi,
    #[error("unknown subscriber")]
    UnknownSubscriber,
    #[error("unknown or already consumed challenge")]
    UnknownChallenge,
    #[error("challenge expired")]
    ChallengeExpired,
    #[error("AUTS MAC-S verification failed")]
    ResyncMacFailure,
    #[error("sequence number space exhausted")]
    SqnExhausted,
    #[error("malformed field `{0}`")]
    Malformed(&'static str),
    #[error("network-core storage failure: {0}")]
    Storage(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkSettings {
    pub sqn_step: u64,
    pub challenge_ttl_secs: u64,
    pub amf: [u8; 2],
}

impl Default for NetworkSettings {
    fn default() -> Self {
        Self {
            sqn_step: 1,
            challenge_ttl_secs: 60,
            // Separation bit set, as for E-UTRAN vectors.
            amf: [0x80, 0x00],
        }
    }
}

#[derive(Debug)]
pub struct SubscriberRecord {
    pub imsi: Imsi,
    key_material: MilenageKeyMaterial,
    pub sqn_he: u64,
    pub amf: [u8; 2],
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChallengeId(pub String);

impl ChallengeId {
    fn random() -> Self {
        let mut b = [0u8; 16];
        OsRng.fill_bytes(&mut b);
        Self(hex::encode(b))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingChallenge {
    pub challenge_id: ChallengeId,
    pub imsi: Imsi,
    #[serde(with = "hexfmt")]
    pub rand: [u8; 16],
    #[serde(with = "hexfmt")]
    pub xres: [u8; 8],
    pub issued_at: Timestamp,
    pub expires_at: Timestamp,
}

/// What the relying service forwards to the agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Challenge {
    pub challenge_id: ChallengeId,
    #[serde(with = "hexfmt")]
    pub rand: [u8; 16],
    #[serde(with = "hexfmt")]
    pub autn: [u8; 16],
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct PersistedSubscriber {
    sqn_he: u64,
    #[serde(with = "hexfmt")]
    amf: [u8; 2],
}

#[derive(Default, Serialize, Deserialize)]
struct Snapshot {
    subscribers: BTreeMap<Imsi, PersistedSubscriber>,
    pending: BTreeMap<ChallengeId, PendingChallenge>,
}

struct Shared {
    snapshot: Snapshot,
    path: Option<PathBuf>,
}

impl Shared {
    fn flush(&self) -> Result<(), NetworkError> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let bytes = serde_json::to_vec_pretty(&self.snapshot)
            .map_err(|e| NetworkError::Storage(e.to_string()))?;
        crate::fsutil::write_atomic(path, &bytes).map_err(|e| NetworkError::Storage(e.to_string()))
    }

    fn purge_expired(&mut self, now: Timestamp) {
        self.snapshot.pending.retain(|_, p| now < p.expires_at);
    }
}

pub struct NetworkCore {
    subscribers: RwLock<HashMap<Imsi, Arc<Mutex<SubscriberRecord>>>>,
    shared: Mutex<Shared>,
    settings: NetworkSettings,
    clock: Arc<dyn Clock>,
}

impl NetworkCore {
    pub fn in_memory(settings: NetworkSettings, clock: Arc<dyn Clock>) -> Self {
        Self {
            subscribers: RwLock::default(),
            shared: Mutex::new(Shared {
                snapshot: Snapshot::default(),
                path: None,
            }),
            settings,
            clock,
        }
    }

    /// Restores SQN_HE and pending challenges from `path`, attaching key
    /// material for every subscriber in `keys`.
    pub fn open(
        path: impl AsRef<Path>,
        settings: NetworkSettings,
        clock: Arc<dyn Clock>,
        keys: Vec<(Imsi, MilenageKeyMaterial)>,
    ) -> Result<Self, NetworkError> {
        let path = path.as_ref();
        let mut snapshot: Snapshot = match std::fs::read(path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| NetworkError::Storage(format!("{}: {e}", path.display())))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Snapshot::default(),
            Err(e) => return Err(NetworkError::Storage(format!("{}: {e}", path.display()))),
        };
        let mut subscribers = HashMap::new();
        let mut persisted = BTreeMap::new();
        for (imsi, key_material) in keys {
            let p = snapshot.subscribers.get(&imsi).copied().unwrap_or(PersistedSubscriber {
                sqn_he: 0,
                amf: settings.amf,
            });
            persisted.insert(imsi.clone(), p);
            subscribers.insert(
                imsi.clone(),
                Arc::new(Mutex::new(SubscriberRecord {
                    imsi,
                    key_material,
                    sqn_he: p.sqn_he,
                    amf: p.amf,
                })),
            );
        }
        if persisted.len() != snapshot.subscribers.len() {
            tracing::warn!("network snapshot lists subscribers absent from the vault; dropping them");
        }
        snapshot.subscribers = persisted;
        snapshot
            .pending
            .retain(|_, p| subscribers.contains_key(&p.imsi));
        let shared = Shared {
            snapshot,
            path: Some(path.to_owned()),
        };
        shared.flush()?;
        Ok(Self {
            subscribers: RwLock::new(subscribers),
            shared: Mutex::new(shared),
            settings,
            clock,
        })
    }

    pub fn settings(&self) -> NetworkSettings {
        self.settings
    }

    fn record(&self, imsi: &str) -> Result<Arc<Mutex<SubscriberRecord>>, NetworkError> {
        let imsi = Imsi::parse(imsi).map_err(|_| NetworkError::InvalidImsi)?;
        self.subscribers
            .read()
            .get(&imsi)
            .cloned()
            .ok_or(NetworkError::UnknownSubscriber)
    }

    pub fn register_subscriber(
        &self,
        imsi: &str,
        key_material: MilenageKeyMaterial,
    ) -> Result<(), NetworkError> {
        let imsi = Imsi::parse(imsi).map_err(|_| NetworkError::InvalidImsi)?;
        let mut subs = self.subscribers.write();
        if subs.contains_key(&imsi) {
            return Err(NetworkError::DuplicateSubscriber);
        }
        {
            let mut shared = self.shared.lock();
            shared.snapshot.subscribers.insert(
                imsi.clone(),
                PersistedSubscriber {
                    sqn_he: 0,
                    amf: self.settings.amf,
                },
            );
            if let Err(e) = shared.flush() {
                shared.snapshot.subscribers.remove(&imsi);
                return Err(e);
            }
        }
        subs.insert(
            imsi.clone(),
            Arc::new(Mutex::new(SubscriberRecord {
                imsi,
                key_material,
                sqn_he: 0,
                amf: self.settings.amf,
            })),
        );
        Ok(())
    }

    pub fn generate_challenge(&self, imsi: &str) -> Result<Challenge, NetworkError> {
        let rec = self.record(imsi)?;
        let mut sub = rec.lock();
        let next = sub
            .sqn_he
            .checked_add(self.settings.sqn_step)
            .filter(|s| *s <= SQN_MAX)
            .ok_or(NetworkError::SqnExhausted)?;
        let mut rand = [0u8; 16];
        OsRng.fill_bytes(&mut rand);
        let sqn = aka::sqn_to_bytes(next).map_err(|_| NetworkError::SqnExhausted)?;
        let out = aka::milenage_compute(&sub.key_material, &rand, &sqn, &sub.amf)
            .map_err(|_| NetworkError::Malformed("key_material"))?;
        let autn = aka::build_autn(&sqn, &out.ak, &sub.amf, &out.mac_a)
            .map_err(|_| NetworkError::Malformed("autn"))?;
        let now = self.clock.now();
        let pending = PendingChallenge {
            challenge_id: ChallengeId::random(),
            imsi: sub.imsi.clone(),
            rand,
            xres: out.res,
            issued_at: now,
            expires_at: now.plus_secs(self.settings.challenge_ttl_secs),
        };
        let challenge = Challenge {
            challenge_id: pending.challenge_id.clone(),
            rand,
            autn,
        };
        {
            let mut shared = self.shared.lock();
            shared.purge_expired(now);
            shared
                .snapshot
                .pending
                .insert(pending.challenge_id.clone(), pending);
            shared.snapshot.subscribers.insert(
                sub.imsi.clone(),
                PersistedSubscriber {
                    sqn_he: next,
                    amf: sub.amf,
                },
            );
            shared.flush()?;
        }
        sub.sqn_he = next;
        Ok(challenge)
    }

    /// Single use: the challenge is consumed whatever the outcome.
    pub fn confirm_res(&self, challenge_id: &str, res: &[u8]) -> Result<bool, NetworkError> {
        let now = self.clock.now();
        let mut shared = self.shared.lock();
        let pending = shared
            .snapshot
            .pending
            .remove(&ChallengeId(challenge_id.to_owned()))
            .ok_or(NetworkError::UnknownChallenge)?;
        shared.purge_expired(now);
        shared.flush()?;
        if now >= pending.expires_at {
            return Err(NetworkError::ChallengeExpired);
        }
        Ok(bool::from(pending.xres.as_slice().ct_eq(res)))
    }

    pub fn resynchronize(&self, imsi: &str, rand: &[u8], auts: &[u8]) -> Result<(), NetworkError> {
        let rec = self.record(imsi)?;
        let rand: [u8; 16] = rand.try_into().map_err(|_| NetworkError::Malformed("rand"))?;
        let auts = Auts::from_bytes(auts).map_err(|_| NetworkError::Malformed("auts"))?;
        let mut sub = rec.lock();
        let sqn_ms = auts
            .open(&sub.key_material, &rand)
            .ok_or(NetworkError::ResyncMacFailure)?;
        // Never move SQN_HE backwards: a replayed stale AUTS must not make
        // the network reissue sequence numbers.
        let target = sqn_ms
            .checked_add(self.settings.sqn_step)
            .filter(|s| *s <= SQN_MAX)
            .ok_or(NetworkError::SqnExhausted)?
            .max(sub.sqn_he);
        {
            let mut shared = self.shared.lock();
            shared
                .snapshot
                .pending
                .retain(|_, p| !(p.imsi == sub.imsi && p.rand == rand));
            shared.snapshot.subscribers.insert(
                sub.imsi.clone(),
                PersistedSubscriber {
                    sqn_he: target,
                    amf: sub.amf,
                },
            );
            shared.flush()?;
        }
        tracing::debug!(imsi, from = sub.sqn_he, to = target, "sqn resynchronised");
        sub.sqn_he = target;
        Ok(())
    }

    pub fn sqn_he(&self, imsi: &str) -> Result<u64, NetworkError> {
        Ok(self.record(imsi)?.lock().sqn_he)
    }

    pub fn pending_count(&self) -> usize {
        self.shared.lock().snapshot.pending.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use std::collections::HashSet;

    const IMSI: &str = "001010000000001";

    fn km() -> MilenageKeyMaterial {
        let mut k = [0u8; 16];
        let mut opc = [0u8; 16];
        OsRng.fill_bytes(&mut k);
        OsRng.fill_bytes(&mut opc);
        MilenageKeyMaterial::from_opc(&k, &opc).unwrap()
    }

    fn core() -> (NetworkCore, Arc<ManualClock>, MilenageKeyMaterial) {
        let clock = Arc::new(ManualClock::new(Timestamp::from_secs(1_000)));
        let net = NetworkCore::in_memory(NetworkSettings::default(), clock.clone());
        let km = km();
        net.register_subscriber(IMSI, km.clone()).unwrap();
        (net, clock, km)
    }

    fn embedded_sqn(km: &MilenageKeyMaterial, c: &Challenge) -> u64 {
        let ak = aka::anonymity_key(km, &c.rand);
        aka::sqn_from_bytes(&aka::parse_autn(&c.autn, &ak).unwrap().sqn)
    }

    fn res_for(km: &MilenageKeyMaterial, c: &Challenge) -> [u8; 8] {
        aka::milenage_compute(km, &c.rand, &[0; 6], &[0; 2]).unwrap().res
    }

    #[test]
    fn register_errors() {
        let (net, _, km) = core();
        assert_eq!(net.register_subscriber(IMSI, km.clone()), Err(NetworkError::DuplicateSubscriber));
        assert_eq!(net.register_subscriber("12345", km), Err(NetworkError::InvalidImsi));
        assert_eq!(net.sqn_he(IMSI), Ok(0));
    }

    #[test]
    fn consecutive_challenges_are_fresh() {
        let (net, _, km) = core();
        let a = net.generate_challenge(IMSI).unwrap();
        let b = net.generate_challenge(IMSI).unwrap();
        assert_ne!(a.rand, b.rand);
        assert_eq!(embedded_sqn(&km, &a), 1);
        assert_eq!(embedded_sqn(&km, &b), 2);
        assert_eq!(
            net.generate_challenge("001010000000999"),
            Err(NetworkError::UnknownSubscriber)
        );
    }

    #[test]
    fn rand_never_repeats_over_ten_thousand_draws() {
        let (net, _, km) = core();
        let mut rands = HashSet::new();
        let mut last = 0;
        for _ in 0..10_000 {
            let c = net.generate_challenge(IMSI).unwrap();
            assert!(rands.insert(c.rand));
            let sqn = embedded_sqn(&km, &c);
            assert!(sqn > last);
            last = sqn;
            net.confirm_res(&c.challenge_id.0, &[0; 8]).unwrap();
        }
    }

    #[test]
    fn confirm_is_single_use_and_checks_res() {
        let (net, _, km) = core();
        let c = net.generate_challenge(IMSI).unwrap();
        let res = res_for(&km, &c);
        assert_eq!(net.confirm_res(&c.challenge_id.0, &res), Ok(true));
        assert_eq!(net.confirm_res(&c.challenge_id.0, &res), Err(NetworkError::UnknownChallenge));

        let c = net.generate_challenge(IMSI).unwrap();
        let mut res = res_for(&km, &c);
        res[0] ^= 0x01;
        assert_eq!(net.confirm_res(&c.challenge_id.0, &res), Ok(false));
        assert_eq!(net.confirm_res(&c.challenge_id.0, &res), Err(NetworkError::UnknownChallenge));
    }

    #[test]
    fn challenges_expire_after_ttl() {
        let (net, clock, km) = core();
        let c = net.generate_challenge(IMSI).unwrap();
        clock.advance_secs(60);
        assert_eq!(
            net.confirm_res(&c.challenge_id.0, &res_for(&km, &c)),
            Err(NetworkError::ChallengeExpired)
        );
        let c = net.generate_challenge(IMSI).unwrap();
        clock.advance_millis(59_999);
        assert_eq!(net.confirm_res(&c.challenge_id.0, &res_for(&km, &c)), Ok(true));
    }

    #[test]
    fn resync_moves_sqn_past_ms_value() {
        let (net, _, km) = core();
        let rand = [3u8; 16];
        let auts = Auts::generate(&km, &rand, 700).unwrap();
        net.resynchronize(IMSI, &rand, &auts.to_bytes()).unwrap();
        assert_eq!(net.sqn_he(IMSI), Ok(701));
        let c = net.generate_challenge(IMSI).unwrap();
        assert!(embedded_sqn(&km, &c) > 700);

        let mut bad = auts.to_bytes();
        bad[13] ^= 1;
        assert_eq!(net.resynchronize(IMSI, &rand, &bad), Err(NetworkError::ResyncMacFailure));
        assert_eq!(
            net.resynchronize("001010000000999", &rand, &auts.to_bytes()),
            Err(NetworkError::UnknownSubscriber)
        );
        // Stale AUTS never rewinds SQN_HE.
        let stale = Auts::generate(&km, &rand, 5).unwrap();
        net.resynchronize(IMSI, &rand, &stale.to_bytes()).unwrap();
        assert_eq!(net.sqn_he(IMSI), Ok(702));
    }

    #[test]
    fn restart_restores_sqn_and_pending() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("network.json");
        let clock = Arc::new(ManualClock::new(Timestamp::from_secs(1_000)));
        let km = km();
        let imsi = Imsi::parse(IMSI).unwrap();
        let c = {
            let net = NetworkCore::open(&path, NetworkSettings::default(), clock.clone(), vec![]).unwrap();
            net.register_subscriber(IMSI, km.clone()).unwrap();
            net.generate_challenge(IMSI).unwrap();
            net.generate_challenge(IMSI).unwrap()
        };
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains(&hex::encode(km.expose_k())));
        assert!(!text.contains(&hex::encode(km.expose_opc())));

        let net = NetworkCore::open(&path, NetworkSettings::default(), clock, vec![(imsi, km.clone())]).unwrap();
        assert_eq!(net.sqn_he(IMSI), Ok(2));
        assert_eq!(net.confirm_res(&c.challenge_id.0, &res_for(&km, &c)), Ok(true));
    }
}
