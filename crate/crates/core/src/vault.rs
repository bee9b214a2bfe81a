//! Emulated telco-hosted secure element.
//!
//! The vault owns every [`SimProfile`]: subscriber key, OPc, SQN state and the
//! per-profile Ed25519 signing key. Callers get results of cryptographic
//! operations, never the keys. All operations on one profile are serialised
//! by that profile's mutex; distinct profiles proceed in parallel.
//!
//! At rest the vault is a single append-only record log (`vault.state`):
//!
//! ```text
//! "AESIM-VAULT/1\n" { u32-be length || JSON record }*
//! ```
//!
//! Keys are stored in the clear inside that file. A production deployment puts
//! them in an HSM; here the trust boundary is the vault process itself.

use crate::aka::{self, AkaError, Auts, MilenageKeyMaterial, SQN_MAX};
use crate::digest::Measurement;
use crate::hexfmt;
use crate::ids::{Iccid, Imsi};
use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use subtle::ConstantTimeEq;
use thiserror::Error;
use zeroize::Zeroize;

pub const VAULT_MAGIC: &[u8] = b"AESIM-VAULT/1\n";
pub const SIGN_DOMAIN: &[u8] = b"agent-esim-sign/v1";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProfileId(String);

impl ProfileId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    fn is_well_formed(&self) -> bool {
        (1..=128).contains(&self.0.len())
            && self
                .0
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || b"-_.:".contains(&b))
    }
}

impl fmt::Display for ProfileId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ProfileId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProfileState {
    Provisioned,
    Active,
    Suspended,
    Revoked,
}

impl ProfileState {
    pub fn can_transition_to(self, to: ProfileState) -> bool {
        use ProfileState::*;
        matches!(
            (self, to),
            (Provisioned, Active) | (Active, Suspended) | (Suspended, Active)
        ) || (to == Revoked && self != Revoked)
    }
}

impl fmt::Display for ProfileState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Where the agent identity is expected to execute. Immutable after install.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BindingMetadata {
    #[serde(with = "hexfmt")]
    pub agent_public_key: [u8; 32],
    pub expected_measurements: BTreeSet<Measurement>,
    pub enterprise_namespace: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub container_fingerprint: Option<Measurement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deployment_manifest_digest: Option<Measurement>,
}

pub struct SimProfile {
    pub profile_id: ProfileId,
    pub iccid: Iccid,
    pub imsi: Imsi,
    key_material: MilenageKeyMaterial,
    pub sqn_ms: u64,
    signing_key: SigningKey,
    pub state: ProfileState,
    pub binding: BindingMetadata,
    pub policy_id: String,
}

impl SimProfile {
    pub fn new(
        profile_id: ProfileId,
        iccid: Iccid,
        imsi: Imsi,
        key_material: MilenageKeyMaterial,
        signing_key: SigningKey,
        binding: BindingMetadata,
        policy_id: impl Into<String>,
    ) -> Self {
        Self {
            profile_id,
            iccid,
            imsi,
            key_material,
            sqn_ms: 0,
            signing_key,
            state: ProfileState::Provisioned,
            binding,
            policy_id: policy_id.into(),
        }
    }

    pub fn public_key(&self) -> [u8; 32] {
        self.signing_key.verifying_key().to_bytes()
    }

    /// Secret material, for the vault file and key-isolation scans only.
    pub fn key_material(&self) -> &MilenageKeyMaterial {
        &self.key_material
    }

    pub fn expose_signing_key(&self) -> [u8; 32] {
        self.signing_key.to_bytes()
    }

    fn validate(&self) -> Result<(), VaultError> {
        if !self.profile_id.is_well_formed() {
            return Err(VaultError::InvalidProfile("profile_id"));
        }
        if self.binding.expected_measurements.is_empty() {
            return Err(VaultError::InvalidProfile("expected_measurements"));
        }
        if self.binding.enterprise_namespace.trim().is_empty() {
            return Err(VaultError::InvalidProfile("enterprise_namespace"));
        }
        if VerifyingKey::from_bytes(&self.binding.agent_public_key).is_err() {
            return Err(VaultError::InvalidProfile("agent_public_key"));
        }
        if self.sqn_ms > SQN_MAX {
            return Err(VaultError::InvalidProfile("sqn_ms"));
        }
        if self.policy_id.is_empty() {
            return Err(VaultError::InvalidProfile("policy_id"));
        }
        Ok(())
    }
}

impl fmt::Debug for SimProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SimProfile")
            .field("profile_id", &self.profile_id)
            .field("iccid", &self.iccid)
            .field("imsi", &self.imsi)
            .field("key_material", &self.key_material)
            .field("sqn_ms", &self.sqn_ms)
            .field("signing_key", &"<redacted>")
            .field("state", &self.state)
            .field("binding", &self.binding)
            .field("policy_id", &self.policy_id)
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VaultError {
    #[error("unknown profile `{0}`")]
    UnknownProfile(String),
    #[error("profile is not active (state {0})")]
    ProfileNotActive(ProfileState),
    #[error("duplicate profile: `{0}` already in use")]
    DuplicateProfile(&'static str),
    #[error("invalid profile: field `{0}`")]
    InvalidProfile(&'static str),
    #[error("illegal lifecycle transition {from} -> {to}")]
    IllegalTransition { from: ProfileState, to: ProfileState },
    #[error("malformed field `{0}`")]
    Malformed(&'static str),
    #[error(transparent)]
    Aka(#[from] AkaError),
    #[error("sequence number may not decrease")]
    SqnRegression,
    #[error("vault storage failure: {0}")]
    Storage(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AkaOutcome {
    Success {
        res: [u8; aka::RES_LEN],
        ck: [u8; aka::CK_LEN],
        ik: [u8; aka::IK_LEN],
    },
    SyncFailure {
        auts: Auts,
    },
    MacFailure,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignOutput {
    pub profile_id: ProfileId,
    pub signature: [u8; 64],
    pub public_key: [u8; 32],
}

/// Public view of a profile.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileStatus {
    pub profile_id: ProfileId,
    pub state: ProfileState,
    pub imsi: Imsi,
    pub iccid: Iccid,
    pub sqn_ms: u64,
    pub binding: BindingMetadata,
    #[serde(with = "hexfmt")]
    pub public_key: [u8; 32],
    pub policy_id: String,
}

/// The exact bytes a profile key signs: domain tag, profile id, digest.
pub fn signing_message(profile_id: &str, digest: &[u8; 32]) -> Vec<u8> {
    let mut msg = Vec::with_capacity(SIGN_DOMAIN.len() + profile_id.len() + 32);
    msg.extend_from_slice(SIGN_DOMAIN);
    msg.extend_from_slice(profile_id.as_bytes());
    msg.extend_from_slice(digest);
    msg
}

pub fn verify_profile_signature(
    public_key: &[u8; 32],
    profile_id: &str,
    digest: &[u8; 32],
    signature: &[u8; 64],
) -> bool {
    let Ok(key) = VerifyingKey::from_bytes(public_key) else {
        return false;
    };
    key.verify_strict(
        &signing_message(profile_id, digest),
        &Signature::from_bytes(signature),
    )
    .is_ok()
}

type Slot = Arc<Mutex<SimProfile>>;

#[derive(Default)]
struct Slots {
    by_id: HashMap<ProfileId, Slot>,
    imsis: HashSet<Imsi>,
    iccids: HashSet<Iccid>,
}

pub struct Vault {
    slots: RwLock<Slots>,
    store: Option<Mutex<VaultFile>>,
}

impl Vault {
    pub fn in_memory() -> Self {
        Self {
            slots: RwLock::default(),
            store: None,
        }
    }

    /// Opens (or creates) the state file and replays it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, VaultError> {
        let (file, profiles) = VaultFile::open(path.as_ref())?;
        let mut slots = Slots::default();
        for p in profiles {
            slots.imsis.insert(p.imsi.clone());
            slots.iccids.insert(p.iccid.clone());
            slots
                .by_id
                .insert(p.profile_id.clone(), Arc::new(Mutex::new(p)));
        }
        Ok(Self {
            slots: RwLock::new(slots),
            store: Some(Mutex::new(file)),
        })
    }

    fn persist(&self, record: &VaultRecord) -> Result<(), VaultError> {
        match &self.store {
            Some(store) => store.lock().append(record),
            None => Ok(()),
        }
    }

    fn slot(&self, id: &str) -> Result<Slot, VaultError> {
        self.slots
            .read()
            .by_id
            .get(&ProfileId::new(id))
            .cloned()
            .ok_or_else(|| VaultError::UnknownProfile(id.to_owned()))
    }

    pub fn install_profile(&self, mut profile: SimProfile) -> Result<ProfileId, VaultError> {
        profile.state = ProfileState::Provisioned;
        profile.validate()?;
        let mut slots = self.slots.write();
        if slots.by_id.contains_key(&profile.profile_id) {
            return Err(VaultError::DuplicateProfile("profile_id"));
        }
        if slots.imsis.contains(&profile.imsi) {
            return Err(VaultError::DuplicateProfile("imsi"));
        }
        if slots.iccids.contains(&profile.iccid) {
            return Err(VaultError::DuplicateProfile("iccid"));
        }
        self.persist(&VaultRecord::Install(Box::new(StoredProfile::from(&profile))))?;
        let id = profile.profile_id.clone();
        slots.imsis.insert(profile.imsi.clone());
        slots.iccids.insert(profile.iccid.clone());
        slots.by_id.insert(id.clone(), Arc::new(Mutex::new(profile)));
        tracing::info!(profile_id = %id, "profile installed");
        Ok(id)
    }

    /// USIM side of AKA: verify AUTN, enforce SQN freshness, produce RES or AUTS.
    pub fn usim_authenticate(
        &self,
        profile_id: &str,
        rand: &[u8],
        autn: &[u8],
    ) -> Result<AkaOutcome, VaultError> {
        let slot = self.slot(profile_id)?;
        let mut p = slot.lock();
        if p.state != ProfileState::Active {
            return Err(VaultError::ProfileNotActive(p.state));
        }
        let rand: [u8; aka::RAND_LEN] = rand.try_into().map_err(|_| VaultError::Malformed("rand"))?;
        let ak = aka::anonymity_key(&p.key_material, &rand);
        let fields = aka::parse_autn(autn, &ak)?;
        let out = aka::milenage_compute(&p.key_material, &rand, &fields.sqn, &fields.amf)?;
        if !bool::from(out.mac_a.ct_eq(&fields.mac_a)) {
            return Ok(AkaOutcome::MacFailure);
        }
        let sqn = aka::sqn_from_bytes(&fields.sqn);
        if sqn <= p.sqn_ms {
            let auts = Auts::generate(&p.key_material, &rand, p.sqn_ms)?;
            return Ok(AkaOutcome::SyncFailure { auts });
        }
        self.persist(&VaultRecord::Sqn {
            profile_id: p.profile_id.clone(),
            sqn_ms: sqn,
        })?;
        p.sqn_ms = sqn;
        Ok(AkaOutcome::Success {
            res: out.res,
            ck: out.ck,
            ik: out.ik,
        })
    }

    pub fn usim_sign(&self, profile_id: &str, payload_digest: &[u8; 32]) -> Result<SignOutput, VaultError> {
        let slot = self.slot(profile_id)?;
        let p = slot.lock();
        if p.state != ProfileState::Active {
            return Err(VaultError::ProfileNotActive(p.state));
        }
        let signature = p
            .signing_key
            .sign(&signing_message(p.profile_id.as_str(), payload_digest));
        Ok(SignOutput {
            profile_id: p.profile_id.clone(),
            signature: signature.to_bytes(),
            public_key: p.public_key(),
        })
    }

    /// Returns the previous state. Revoking an already revoked profile is a no-op.
    pub fn set_profile_state(
        &self,
        profile_id: &str,
        new_state: ProfileState,
    ) -> Result<ProfileState, VaultError> {
        let slot = self.slot(profile_id)?;
        let mut p = slot.lock();
        let from = p.state;
        if from == ProfileState::Revoked && new_state == ProfileState::Revoked {
            return Ok(from);
        }
        if !from.can_transition_to(new_state) {
            return Err(VaultError::IllegalTransition { from, to: new_state });
        }
        self.persist(&VaultRecord::State {
            profile_id: p.profile_id.clone(),
            state: new_state,
        })?;
        p.state = new_state;
        tracing::info!(profile_id, %from, to = %new_state, "profile state changed");
        Ok(from)
    }

    pub fn get_profile_status(&self, profile_id: &str) -> Result<ProfileStatus, VaultError> {
        let slot = self.slot(profile_id)?;
        let p = slot.lock();
        Ok(ProfileStatus {
            profile_id: p.profile_id.clone(),
            state: p.state,
            imsi: p.imsi.clone(),
            iccid: p.iccid.clone(),
            sqn_ms: p.sqn_ms,
            binding: p.binding.clone(),
            public_key: p.public_key(),
            policy_id: p.policy_id.clone(),
        })
    }

    pub fn state(&self, profile_id: &str) -> Result<ProfileState, VaultError> {
        Ok(self.slot(profile_id)?.lock().state)
    }

    /// Operator tool: move SQN_MS forward (never backward), e.g. after a
    /// profile has been exercised against another network.
    pub fn advance_sqn_ms(&self, profile_id: &str, sqn_ms: u64) -> Result<u64, VaultError> {
        let slot = self.slot(profile_id)?;
        let mut p = slot.lock();
        if sqn_ms < p.sqn_ms {
            return Err(VaultError::SqnRegression);
        }
        if sqn_ms > SQN_MAX {
            return Err(AkaError::SqnOutOfRange(sqn_ms).into());
        }
        self.persist(&VaultRecord::Sqn {
            profile_id: p.profile_id.clone(),
            sqn_ms,
        })?;
        Ok(std::mem::replace(&mut p.sqn_ms, sqn_ms))
    }

    pub fn profile_ids(&self) -> Vec<ProfileId> {
        let mut ids: Vec<_> = self.slots.read().by_id.keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn imsis(&self) -> Vec<Imsi> {
        self.slots.read().imsis.iter().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.slots.read().by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Key material for the co-operated home network, used only to rebuild the
    /// network core's subscriber table from the single at-rest secret store.
    pub(crate) fn subscriber_material(&self) -> Vec<(Imsi, MilenageKeyMaterial)> {
        let slots: Vec<Slot> = self.slots.read().by_id.values().cloned().collect();
        slots
            .iter()
            .map(|s| {
                let p = s.lock();
                (p.imsi.clone(), p.key_material.clone())
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum VaultRecord {
    Install(Box<StoredProfile>),
    State {
        profile_id: ProfileId,
        state: ProfileState,
    },
    Sqn {
        profile_id: ProfileId,
        sqn_ms: u64,
    },
}

#[derive(Serialize, Deserialize)]
struct StoredProfile {
    profile_id: ProfileId,
    iccid: Iccid,
    imsi: Imsi,
    #[serde(with = "hexfmt")]
    k: [u8; 16],
    #[serde(default, with = "hexfmt::option")]
    op: Option<[u8; 16]>,
    #[serde(with = "hexfmt")]
    opc: [u8; 16],
    sqn_ms: u64,
    #[serde(with = "hexfmt")]
    signing_key: [u8; 32],
    state: ProfileState,
    binding: BindingMetadata,
    policy_id: String,
}

impl Drop for StoredProfile {
    fn drop(&mut self) {
        self.k.zeroize();
        self.opc.zeroize();
        self.signing_key.zeroize();
        if let Some(op) = self.op.as_mut() {
            op.zeroize();
        }
    }
}

impl From<&SimProfile> for StoredProfile {
    fn from(p: &SimProfile) -> Self {
        Self {
            profile_id: p.profile_id.clone(),
            iccid: p.iccid.clone(),
            imsi: p.imsi.clone(),
            k: *p.key_material.expose_k(),
            op: p.key_material.expose_op().copied(),
            opc: *p.key_material.expose_opc(),
            sqn_ms: p.sqn_ms,
            signing_key: p.signing_key.to_bytes(),
            state: p.state,
            binding: p.binding.clone(),
            policy_id: p.policy_id.clone(),
        }
    }
}

impl StoredProfile {
    fn into_profile(self) -> Result<SimProfile, VaultError> {
        let key_material = match self.op {
            Some(op) => {
                let km = MilenageKeyMaterial::from_op(&self.k, &op)?;
                if km.expose_opc() != &self.opc {
                    return Err(VaultError::Storage("stored OPc does not match OP".into()));
                }
                km
            }
            None => MilenageKeyMaterial::from_opc(&self.k, &self.opc)?,
        };
        Ok(SimProfile {
            profile_id: self.profile_id.clone(),
            iccid: self.iccid.clone(),
            imsi: self.imsi.clone(),
            key_material,
            sqn_ms: self.sqn_ms,
            signing_key: SigningKey::from_bytes(&self.signing_key),
            state: self.state,
            binding: self.binding.clone(),
            policy_id: self.policy_id.clone(),
        })
    }
}

struct VaultFile {
    file: File,
    path: PathBuf,
}

fn storage(path: &Path, what: &str, e: impl fmt::Display) -> VaultError {
    VaultError::Storage(format!("{}: {what}: {e}", path.display()))
}

/// Replays the record log. Returns the profiles and the byte length of the
/// last complete record (a torn trailing record is ignored).
fn replay(path: &Path, bytes: &[u8]) -> Result<(Vec<SimProfile>, usize), VaultError> {
    if !bytes.starts_with(VAULT_MAGIC) {
        return Err(VaultError::Storage(format!(
            "{}: missing AESIM-VAULT/1 header",
            path.display()
        )));
    }
    let mut order: Vec<ProfileId> = Vec::new();
    let mut profiles: HashMap<ProfileId, SimProfile> = HashMap::new();
    let mut offset = VAULT_MAGIC.len();
    let mut index = 0usize;
    while bytes.len() - offset >= 4 {
        let len = u32::from_be_bytes(bytes[offset..offset + 4].try_into().unwrap()) as usize;
        let body_start = offset + 4;
        if bytes.len() - body_start < len {
            break;
        }
        let body = &bytes[body_start..body_start + len];
        // Deliberately drop serde's message: it can echo field contents.
        let record: VaultRecord = serde_json::from_slice(body)
            .map_err(|_| storage(path, "corrupt record", format!("#{index} at byte {offset}")))?;
        match record {
            VaultRecord::Install(stored) => {
                let p = stored.into_profile()?;
                if profiles.contains_key(&p.profile_id) {
                    return Err(storage(path, "duplicate install", &p.profile_id));
                }
                order.push(p.profile_id.clone());
                profiles.insert(p.profile_id.clone(), p);
            }
            VaultRecord::State { profile_id, state } => {
                let p = profiles
                    .get_mut(&profile_id)
                    .ok_or_else(|| storage(path, "state for unknown profile", &profile_id))?;
                p.state = state;
            }
            VaultRecord::Sqn { profile_id, sqn_ms } => {
                let p = profiles
                    .get_mut(&profile_id)
                    .ok_or_else(|| storage(path, "sqn for unknown profile", &profile_id))?;
                if sqn_ms < p.sqn_ms {
                    return Err(storage(path, "sqn regression", &profile_id));
                }
                p.sqn_ms = sqn_ms;
            }
        }
        offset = body_start + len;
        index += 1;
    }
    let out = order
        .into_iter()
        .filter_map(|id| profiles.remove(&id))
        .collect();
    Ok((out, offset))
}

/// Loads every profile (secrets included) from a vault state file without
/// opening it for writing.
pub fn read_state_file(path: impl AsRef<Path>) -> Result<Vec<SimProfile>, VaultError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| storage(path, "read", e))?;
    Ok(replay(path, &bytes)?.0)
}

impl VaultFile {
    fn open(path: &Path) -> Result<(Self, Vec<SimProfile>), VaultError> {
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)
            .map_err(|e| storage(path, "open", e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)
            .map_err(|e| storage(path, "read", e))?;
        let profiles = if bytes.is_empty() {
            file.write_all(VAULT_MAGIC)
                .and_then(|_| file.sync_all())
                .map_err(|e| storage(path, "write header", e))?;
            Vec::new()
        } else {
            let (profiles, good_len) = replay(path, &bytes)?;
            if good_len < bytes.len() {
                tracing::warn!(
                    path = %path.display(),
                    dropped = bytes.len() - good_len,
                    "discarding torn trailing vault record"
                );
                file.set_len(good_len as u64)
                    .map_err(|e| storage(path, "truncate", e))?;
            }
            profiles
        };
        file.seek(SeekFrom::End(0))
            .map_err(|e| storage(path, "seek", e))?;
        Ok((
            Self {
                file,
                path: path.to_owned(),
            },
            profiles,
        ))
    }

    fn append(&mut self, record: &VaultRecord) -> Result<(), VaultError> {
        let mut body = serde_json::to_vec(record).map_err(|e| storage(&self.path, "encode", e))?;
        let mut frame = Vec::with_capacity(4 + body.len());
        frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
        frame.extend_from_slice(&body);
        body.zeroize();
        let res = self
            .file
            .write_all(&frame)
            .and_then(|_| self.file.sync_data())
            .map_err(|e| storage(&self.path, "append", e));
        frame.zeroize();
        res
    }
}
