//! File formats and layout of the persisted store.
//!
//! ```text
//! <store>/hierarchy.json          graph (clear; no secrets)
//! <store>/keystore.json           node keys sealed under the master key; public tokens; user wraps
//! <store>/capsules.json           reference subjects and BioCapsules
//! <store>/pubkeys.json            users' Ed25519 verifying keys
//! <store>/sessions.json           live sessions, sealed
//! <store>/cohorts.json            cohort definitions (member ids only)
//! <store>/transfers.json          in-flight transfer envelopes
//! <store>/records/log.jsonl       append-only log of sealed records
//! <store>/records/index.json      record id -> latest log line
//! <store>/provenance/<id>.jsonl   one base64 canonical provenance record per line
//! <store>/vault/<user>.json       simulated client secrets, sealed
//! <store>/audit/                  see the audit module
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use dynaswap_core::biocap::{CapsuleRegistry, SessionGrant};
use dynaswap_core::crypto::{aead_open, aead_seal, length_prefixed, random_nonce, NONCE_LEN};
use dynaswap_core::dlkm::{EdgeToken, KeyStore, NodeKey, PersonalSecret, SecretKey, UserKeyWrap};
use dynaswap_core::hierarchy::{HierarchyGraph, NodeKind};
use dynaswap_core::provenance::{ProvenanceChain, ProvenanceRecord, TransferEnvelope};
use dynaswap_core::recordstore::{Cohort, SealedRecord};
use dynaswap_core::{NodeId, UserId};
use ed25519_dalek::VerifyingKey;
use rand_core::CryptoRngCore;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use zeroize::Zeroizing;

use crate::codec::{b64, decode_b64, encode_b64, hex32};
use crate::config::MasterKey;
use crate::fsio;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store io at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("corrupt store artifact {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },
}

/// Graph file: the documented schema plus care-scoped roles and retired ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphFile {
    pub roles: Vec<NodeId>,
    pub data: Vec<NodeId>,
    pub role_edges: Vec<(NodeId, NodeId)>,
    pub data_edges: Vec<(NodeId, NodeId)>,
    pub associations: Vec<(NodeId, NodeId)>,
    pub user_roles: BTreeMap<UserId, Vec<NodeId>>,
    #[serde(default)]
    pub care_scoped: Vec<NodeId>,
    #[serde(default)]
    pub retired: Vec<NodeId>,
}

impl GraphFile {
    pub fn from_graph(graph: &HierarchyGraph, care_scoped: &BTreeSet<NodeId>) -> Self {
        let pairs = |it: &mut dyn Iterator<Item = (&NodeId, &NodeId)>| -> Vec<(NodeId, NodeId)> {
            it.map(|(a, b)| (a.clone(), b.clone())).collect()
        };
        Self {
            roles: graph.roles().cloned().collect(),
            data: graph.data_nodes().cloned().collect(),
            role_edges: pairs(&mut graph.edges(NodeKind::Role)),
            data_edges: pairs(&mut graph.edges(NodeKind::Data)),
            associations: pairs(&mut graph.associations()),
            user_roles: graph
                .users()
                .map(|(u, r)| (u.clone(), r.iter().cloned().collect()))
                .collect(),
            care_scoped: care_scoped.iter().cloned().collect(),
            retired: graph.retired().cloned().collect(),
        }
    }

    pub fn into_graph(self) -> Result<(HierarchyGraph, BTreeSet<NodeId>), String> {
        let mut graph = HierarchyGraph::new();
        let err = |e: dynaswap_core::hierarchy::HierarchyError| e.to_string();
        for id in self.roles {
            graph.add_node(NodeKind::Role, id).map_err(err)?;
        }
        for id in self.data {
            graph.add_node(NodeKind::Data, id).map_err(err)?;
        }
        for (p, c) in self.role_edges {
            graph.add_edge(NodeKind::Role, p, c).map_err(err)?;
        }
        for (p, c) in self.data_edges {
            graph.add_edge(NodeKind::Data, p, c).map_err(err)?;
        }
        for (r, d) in self.associations {
            graph.associate(r, d).map_err(err)?;
        }
        for (user, roles) in self.user_roles {
            graph.add_user(user.clone()).map_err(err)?;
            for role in roles {
                graph.assign(&user, role).map_err(err)?;
            }
        }
        for id in self.retired {
            graph.retire(id).map_err(err)?;
        }
        let care_scoped: BTreeSet<NodeId> = self.care_scoped.into_iter().collect();
        if let Some(bad) = care_scoped
            .iter()
            .find(|r| graph.kind_of(r) != Some(NodeKind::Role))
        {
            return Err(format!("care-scoped id {bad} is not a role"));
        }
        Ok((graph, care_scoped))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SealedBlob {
    #[serde(with = "b64")]
    nonce: [u8; NONCE_LEN],
    #[serde(with = "b64")]
    ciphertext: Vec<u8>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SealedNodeKey {
    node: NodeId,
    version: u32,
    #[serde(flatten)]
    sealed: SealedBlob,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TokenJson {
    parent: NodeId,
    child: NodeId,
    parent_version: u32,
    child_version: u32,
    #[serde(with = "b64")]
    nonce: [u8; NONCE_LEN],
    #[serde(with = "b64")]
    ciphertext: Vec<u8>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WrapJson {
    user: UserId,
    role: NodeId,
    role_version: u32,
    #[serde(with = "b64")]
    nonce: [u8; NONCE_LEN],
    #[serde(with = "b64")]
    ciphertext: Vec<u8>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct KeystoreFile {
    current: Vec<SealedNodeKey>,
    history: Vec<SealedNodeKey>,
    tokens: Vec<TokenJson>,
    wraps: Vec<WrapJson>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SealedRecordJson {
    record_id: String,
    data_node: NodeId,
    key_version: u32,
    attending: BTreeSet<UserId>,
    #[serde(with = "b64")]
    nonce: [u8; NONCE_LEN],
    #[serde(with = "b64")]
    ciphertext: Vec<u8>,
}

impl From<&SealedRecord> for SealedRecordJson {
    fn from(r: &SealedRecord) -> Self {
        Self {
            record_id: r.record_id.clone(),
            data_node: r.data_node.clone(),
            key_version: r.key_version,
            attending: r.attending.clone(),
            nonce: r.nonce,
            ciphertext: r.ciphertext.clone(),
        }
    }
}

impl From<SealedRecordJson> for SealedRecord {
    fn from(r: SealedRecordJson) -> Self {
        Self {
            record_id: r.record_id,
            data_node: r.data_node,
            key_version: r.key_version,
            attending: r.attending,
            nonce: r.nonce,
            ciphertext: r.ciphertext,
        }
    }
}

/// Wire and at-rest form of a transfer envelope.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvelopeJson {
    pub sender: UserId,
    pub receiver: UserId,
    #[serde(with = "hex32")]
    pub chain_head_hash: [u8; 32],
    #[serde(with = "b64")]
    pub nonce: [u8; NONCE_LEN],
    #[serde(with = "b64")]
    pub payload: Vec<u8>,
    #[serde(with = "hex32")]
    pub mac: [u8; 32],
}

impl From<&TransferEnvelope> for EnvelopeJson {
    fn from(e: &TransferEnvelope) -> Self {
        Self {
            sender: e.sender.clone(),
            receiver: e.receiver.clone(),
            chain_head_hash: e.chain_head_hash,
            nonce: e.nonce,
            payload: e.payload.clone(),
            mac: e.mac,
        }
    }
}

impl From<EnvelopeJson> for TransferEnvelope {
    fn from(e: EnvelopeJson) -> Self {
        Self {
            sender: e.sender,
            receiver: e.receiver,
            chain_head_hash: e.chain_head_hash,
            nonce: e.nonce,
            payload: e.payload,
            mac: e.mac,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InboxItem {
    pub id: u64,
    pub record_id: String,
    pub sent_at: u64,
    pub envelope: EnvelopeJson,
}

/// Simulated client-side secrets of one user.
#[derive(Serialize, Deserialize)]
struct VaultEntry {
    user: UserId,
    #[serde(with = "hex32")]
    secret: [u8; 32],
    #[serde(with = "hex32")]
    signing_seed: [u8; 32],
    biometric_seed: u64,
}

pub struct ClientSecrets {
    pub personal: PersonalSecret,
    pub biometric_seed: u64,
}

/// Everything read back from a store directory.
#[derive(Default)]
pub struct Loaded {
    pub graph: HierarchyGraph,
    pub care_scoped: BTreeSet<NodeId>,
    pub keys: KeyStore,
    pub capsules: CapsuleRegistry,
    pub pubkeys: BTreeMap<UserId, VerifyingKey>,
    pub sessions: Vec<SessionGrant>,
    pub cohorts: Vec<Cohort>,
    pub inbox: Vec<InboxItem>,
    pub records: Vec<SealedRecord>,
    pub chains: BTreeMap<String, ProvenanceChain>,
    pub vault: BTreeMap<UserId, ClientSecrets>,
}

/// Handle on a store directory. Tracks what is already on disk so the
/// append-only logs only receive new entries.
pub struct Store {
    root: PathBuf,
    master: MasterKey,
    record_index: BTreeMap<String, usize>,
    record_lines: usize,
    persisted_records: HashMap<String, [u8; 32]>,
    persisted_chain_len: HashMap<String, usize>,
}

/// Record ids double as file names, so they are restricted to a safe alphabet.
pub fn valid_object_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_' || b == b'.')
}

impl Store {
    pub fn new(root: &Path, master: MasterKey) -> Self {
        Self {
            root: root.to_path_buf(),
            master,
            record_index: BTreeMap::new(),
            record_lines: 0,
            persisted_records: HashMap::new(),
            persisted_chain_len: HashMap::new(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn provenance_path(&self, record_id: &str) -> PathBuf {
        self.root
            .join("provenance")
            .join(format!("{record_id}.jsonl"))
    }

    pub fn audit_dir(&self) -> PathBuf {
        self.root.join("audit")
    }

    pub fn master(&self) -> &MasterKey {
        &self.master
    }

    fn io(&self, path: &Path) -> impl FnOnce(io::Error) -> StoreError {
        let path = path.to_path_buf();
        move |source| StoreError::Io { path, source }
    }

    fn corrupt(path: &Path, detail: impl ToString) -> StoreError {
        StoreError::Corrupt {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        }
    }

    fn read_json<T: DeserializeOwned>(&self, rel: &str) -> Result<Option<T>, StoreError> {
        let path = self.path(rel);
        match fsio::read_optional(&path).map_err(self.io(&path))? {
            None => Ok(None),
            Some(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| Self::corrupt(&path, e)),
        }
    }

    fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<(), StoreError> {
        let path = self.path(rel);
        fsio::write_json(&path, value).map_err(self.io(&path))
    }

    fn seal(
        &self,
        purpose: &str,
        context: &[&[u8]],
        plaintext: &[u8],
        rng: &mut dyn CryptoRngCore,
    ) -> SealedBlob {
        let key = Zeroizing::new(self.master.subkey(purpose, context));
        let mut aad_parts: Vec<&[u8]> = vec![purpose.as_bytes()];
        aad_parts.extend_from_slice(context);
        let nonce = random_nonce(rng);
        SealedBlob {
            nonce,
            ciphertext: aead_seal(&key, &nonce, &length_prefixed(&aad_parts), plaintext),
        }
    }

    fn open(
        &self,
        purpose: &str,
        context: &[&[u8]],
        blob: &SealedBlob,
    ) -> Option<Zeroizing<Vec<u8>>> {
        let key = Zeroizing::new(self.master.subkey(purpose, context));
        let mut aad_parts: Vec<&[u8]> = vec![purpose.as_bytes()];
        aad_parts.extend_from_slice(context);
        aead_open(
            &key,
            &blob.nonce,
            &length_prefixed(&aad_parts),
            &blob.ciphertext,
        )
        .map(Zeroizing::new)
    }

    pub fn is_initialized(&self) -> bool {
        self.path("hierarchy.json").exists()
    }

    pub fn load(&mut self) -> Result<Loaded, StoreError> {
        let mut out = Loaded::default();
        if !self.is_initialized() {
            return Ok(out);
        }
        let graph_file: GraphFile = self.read_json("hierarchy.json")?.unwrap_or_default();
        let (graph, care_scoped) = graph_file
            .into_graph()
            .map_err(|e| Self::corrupt(&self.path("hierarchy.json"), e))?;
        out.graph = graph;
        out.care_scoped = care_scoped;
        out.keys = self.load_keys()?;
        out.capsules = self.read_json("capsules.json")?.unwrap_or_default();
        let pubkeys: BTreeMap<UserId, String> = self.read_json("pubkeys.json")?.unwrap_or_default();
        for (user, text) in pubkeys {
            let key = decode_b64(&text)
                .and_then(|b| <[u8; 32]>::try_from(b).ok())
                .and_then(|b| VerifyingKey::from_bytes(&b).ok())
                .ok_or_else(|| {
                    Self::corrupt(&self.path("pubkeys.json"), format!("bad key for {user}"))
                })?;
            out.pubkeys.insert(user, key);
        }
        if let Some(blob) = self.read_json::<SealedBlob>("sessions.json")? {
            let plain = self.open("sessions", &[], &blob).ok_or_else(|| {
                Self::corrupt(
                    &self.path("sessions.json"),
                    "does not open under the master key",
                )
            })?;
            out.sessions = serde_json::from_slice(&plain)
                .map_err(|e| Self::corrupt(&self.path("sessions.json"), e))?;
        }
        out.cohorts = self.read_json("cohorts.json")?.unwrap_or_default();
        out.inbox = self.read_json("transfers.json")?.unwrap_or_default();
        out.records = self.load_records()?;
        out.chains = self.load_chains()?;
        out.vault = self.load_vault()?;
        Ok(out)
    }

    fn load_keys(&self) -> Result<KeyStore, StoreError> {
        let path = self.path("keystore.json");
        let Some(file) = self.read_json::<KeystoreFile>("keystore.json")? else {
            return Ok(KeyStore::new());
        };
        let open_key = |k: SealedNodeKey| -> Result<NodeKey, StoreError> {
            let version = k.version.to_be_bytes();
            let plain = self
                .open("node-key", &[k.node.as_bytes(), &version], &k.sealed)
                .ok_or_else(|| {
                    Self::corrupt(&path, format!("key {}@{} does not open", k.node, k.version))
                })?;
            let bytes: [u8; 32] = plain
                .as_slice()
                .try_into()
                .map_err(|_| Self::corrupt(&path, "bad key length"))?;
            Ok(NodeKey::new(
                k.node,
                k.version,
                SecretKey::from_bytes(bytes),
            ))
        };
        let current = file
            .current
            .into_iter()
            .map(open_key)
            .collect::<Result<Vec<_>, _>>()?;
        let history = file
            .history
            .into_iter()
            .map(open_key)
            .collect::<Result<Vec<_>, _>>()?;
        let tokens = file
            .tokens
            .into_iter()
            .map(|t| EdgeToken {
                parent: t.parent,
                child: t.child,
                parent_version: t.parent_version,
                child_version: t.child_version,
                nonce: t.nonce,
                ciphertext: t.ciphertext,
            })
            .collect();
        let wraps = file
            .wraps
            .into_iter()
            .map(|w| UserKeyWrap {
                user: w.user,
                role: w.role,
                role_version: w.role_version,
                nonce: w.nonce,
                ciphertext: w.ciphertext,
            })
            .collect();
        KeyStore::from_parts(current, history, tokens, wraps).map_err(|e| Self::corrupt(&path, e))
    }

    fn load_records(&mut self) -> Result<Vec<SealedRecord>, StoreError> {
        let log_path = self.path("records/log.jsonl");
        let Some(bytes) = fsio::read_optional(&log_path).map_err(self.io(&log_path))? else {
            return Ok(Vec::new());
        };
        let lines: Vec<&[u8]> = bytes
            .split(|b| *b == b'\n')
            .filter(|l| !l.is_empty())
            .collect();
        let index: BTreeMap<String, usize> = match self.read_json("records/index.json")? {
            Some(index) => index,
            None => {
                let mut rebuilt = BTreeMap::new();
                for (i, line) in lines.iter().enumerate() {
                    let r: SealedRecordJson =
                        serde_json::from_slice(line).map_err(|e| Self::corrupt(&log_path, e))?;
                    rebuilt.insert(r.record_id, i);
                }
                rebuilt
            }
        };
        let mut records = Vec::with_capacity(index.len());
        for (id, &line) in &index {
            let raw = lines.get(line).ok_or_else(|| {
                Self::corrupt(&log_path, format!("index points past the log for {id}"))
            })?;
            let r: SealedRecordJson =
                serde_json::from_slice(raw).map_err(|e| Self::corrupt(&log_path, e))?;
            if &r.record_id != id {
                return Err(Self::corrupt(
                    &log_path,
                    format!("index entry {id} points at {}", r.record_id),
                ));
            }
            let sealed = SealedRecord::from(r);
            self.persisted_records
                .insert(id.clone(), sealed.state_hash());
            records.push(sealed);
        }
        self.record_lines = lines.len();
        self.record_index = index;
        Ok(records)
    }

    /// Raw lines of a provenance file, base64-decoded where possible.
    /// Undecodable lines come back empty so verification flags them as malformed.
    pub fn provenance_lines(&self, record_id: &str) -> Result<Option<Vec<Vec<u8>>>, StoreError> {
        let path = self.provenance_path(record_id);
        let Some(bytes) = fsio::read_optional(&path).map_err(self.io(&path))? else {
            return Ok(None);
        };
        let text = String::from_utf8_lossy(&bytes);
        Ok(Some(
            text.lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| decode_b64(l).unwrap_or_default())
                .collect(),
        ))
    }

    fn load_chains(&mut self) -> Result<BTreeMap<String, ProvenanceChain>, StoreError> {
        let dir = self.path("provenance");
        let mut chains = BTreeMap::new();
        if !dir.exists() {
            return Ok(chains);
        }
        for item in fs::read_dir(&dir).map_err(self.io(&dir))? {
            let name = item
                .map_err(self.io(&dir))?
                .file_name()
                .to_string_lossy()
                .into_owned();
            let Some(id) = name.strip_suffix(".jsonl") else {
                continue;
            };
            let lines = self.provenance_lines(id)?.unwrap_or_default();
            let records = lines
                .iter()
                .map(|l| ProvenanceRecord::from_canonical(l))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Self::corrupt(&self.provenance_path(id), e))?;
            self.persisted_chain_len
                .insert(id.to_string(), records.len());
            chains.insert(id.to_string(), ProvenanceChain::from_records(records));
        }
        Ok(chains)
    }

    fn load_vault(&self) -> Result<BTreeMap<UserId, ClientSecrets>, StoreError> {
        let dir = self.path("vault");
        let mut vault = BTreeMap::new();
        if !dir.exists() {
            return Ok(vault);
        }
        for item in fs::read_dir(&dir).map_err(self.io(&dir))? {
            let path = item.map_err(self.io(&dir))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let user = UserId::from(
                path.file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or_default(),
            );
            let bytes = fs::read(&path).map_err(self.io(&path))?;
            let blob: SealedBlob =
                serde_json::from_slice(&bytes).map_err(|e| Self::corrupt(&path, e))?;
            let plain = self
                .open("vault", &[user.as_bytes()], &blob)
                .ok_or_else(|| Self::corrupt(&path, "does not open under the master key"))?;
            let entry: VaultEntry =
                serde_json::from_slice(&plain).map_err(|e| Self::corrupt(&path, e))?;
            if entry.user != user {
                return Err(Self::corrupt(&path, "vault entry belongs to another user"));
            }
            vault.insert(
                user.clone(),
                ClientSecrets {
                    personal: PersonalSecret::from_parts(user, entry.secret, entry.signing_seed),
                    biometric_seed: entry.biometric_seed,
                },
            );
        }
        Ok(vault)
    }

    pub fn save_graph(
        &self,
        graph: &HierarchyGraph,
        care_scoped: &BTreeSet<NodeId>,
    ) -> Result<(), StoreError> {
        self.write_json("hierarchy.json", &GraphFile::from_graph(graph, care_scoped))
    }

    pub fn save_keys(
        &self,
        keys: &KeyStore,
        rng: &mut dyn CryptoRngCore,
    ) -> Result<(), StoreError> {
        let mut seal_key = |k: &NodeKey| {
            let version = k.version().to_be_bytes();
            SealedNodeKey {
                node: k.node().clone(),
                version: k.version(),
                sealed: self.seal(
                    "node-key",
                    &[k.node().as_bytes(), &version],
                    k.secret().as_bytes(),
                    rng,
                ),
            }
        };
        let current: Vec<SealedNodeKey> = keys.current_keys().map(&mut seal_key).collect();
        let history: Vec<SealedNodeKey> = keys.history_keys().map(|k| seal_key(&k)).collect();
        let file = KeystoreFile {
            current,
            history,
            tokens: keys
                .tokens()
                .iter()
                .map(|t| TokenJson {
                    parent: t.parent.clone(),
                    child: t.child.clone(),
                    parent_version: t.parent_version,
                    child_version: t.child_version,
                    nonce: t.nonce,
                    ciphertext: t.ciphertext.clone(),
                })
                .collect(),
            wraps: keys
                .wraps()
                .map(|w| WrapJson {
                    user: w.user.clone(),
                    role: w.role.clone(),
                    role_version: w.role_version,
                    nonce: w.nonce,
                    ciphertext: w.ciphertext.clone(),
                })
                .collect(),
        };
        self.write_json("keystore.json", &file)
    }

    pub fn save_capsules(&self, capsules: &CapsuleRegistry) -> Result<(), StoreError> {
        self.write_json("capsules.json", capsules)
    }

    pub fn save_pubkeys(&self, pubkeys: &BTreeMap<UserId, VerifyingKey>) -> Result<(), StoreError> {
        let encoded: BTreeMap<&UserId, String> = pubkeys
            .iter()
            .map(|(u, k)| (u, encode_b64(k.as_bytes())))
            .collect();
        self.write_json("pubkeys.json", &encoded)
    }

    pub fn save_sessions<'a>(
        &self,
        sessions: impl Iterator<Item = &'a SessionGrant>,
        rng: &mut dyn CryptoRngCore,
    ) -> Result<(), StoreError> {
        let list: Vec<&SessionGrant> = sessions.collect();
        let plain = Zeroizing::new(serde_json::to_vec(&list).expect("sessions serialize"));
        let blob = self.seal("sessions", &[], &plain, rng);
        self.write_json("sessions.json", &blob)
    }

    pub fn save_cohorts<'a>(
        &self,
        cohorts: impl Iterator<Item = &'a Cohort>,
    ) -> Result<(), StoreError> {
        self.write_json("cohorts.json", &cohorts.collect::<Vec<_>>())
    }

    pub fn save_inbox(&self, inbox: &[InboxItem]) -> Result<(), StoreError> {
        self.write_json("transfers.json", &inbox)
    }

    pub fn save_client(
        &self,
        secrets: &ClientSecrets,
        rng: &mut dyn CryptoRngCore,
    ) -> Result<(), StoreError> {
        let user = secrets.personal.user();
        let entry = VaultEntry {
            user: user.clone(),
            secret: *secrets.personal.secret().as_bytes(),
            signing_seed: secrets.personal.signing_seed(),
            biometric_seed: secrets.biometric_seed,
        };
        let plain = Zeroizing::new(serde_json::to_vec(&entry).expect("vault entry serializes"));
        let blob = self.seal("vault", &[user.as_bytes()], &plain, rng);
        self.write_json(&format!("vault/{user}.json"), &blob)
    }

    pub fn remove_client(&self, user: &UserId) -> Result<(), StoreError> {
        let path = self.path(&format!("vault/{user}.json"));
        match fs::remove_file(&path) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(self.io(&path)(e)),
            _ => Ok(()),
        }
    }

    /// Appends records whose ciphertext changed since the last call and rewrites the index.
    pub fn sync_records<'a>(
        &mut self,
        records: impl Iterator<Item = &'a SealedRecord>,
    ) -> Result<usize, StoreError> {
        let log_path = self.path("records/log.jsonl");
        let mut appended = 0;
        for record in records {
            let hash = record.state_hash();
            if self.persisted_records.get(&record.record_id) == Some(&hash) {
                continue;
            }
            let line =
                serde_json::to_string(&SealedRecordJson::from(record)).expect("record serializes");
            fsio::append_line(&log_path, &line).map_err(self.io(&log_path))?;
            self.record_index
                .insert(record.record_id.clone(), self.record_lines);
            self.record_lines += 1;
            self.persisted_records
                .insert(record.record_id.clone(), hash);
            appended += 1;
        }
        if appended > 0 {
            self.write_json("records/index.json", &self.record_index)?;
        }
        Ok(appended)
    }

    /// Appends chain records not yet on disk.
    pub fn sync_chains<'a>(
        &mut self,
        chains: impl Iterator<Item = (&'a String, &'a ProvenanceChain)>,
    ) -> Result<usize, StoreError> {
        let mut appended = 0;
        for (id, chain) in chains {
            let done = self.persisted_chain_len.get(id).copied().unwrap_or(0);
            if chain.len() <= done {
                continue;
            }
            let path = self.provenance_path(id);
            for record in &chain.records()[done..] {
                fsio::append_line(&path, &encode_b64(&record.canonical_bytes()))
                    .map_err(self.io(&path))?;
                appended += 1;
            }
            self.persisted_chain_len.insert(id.clone(), chain.len());
        }
        Ok(appended)
    }
}
