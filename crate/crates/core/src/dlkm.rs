//! Dual-level key management.
//!
//! Node level: every role and data node owns a versioned 32-byte key. Each
//! key edge of the hierarchy (role → junior role, role → associated data,
//! data → child data) carries a public [`EdgeToken`]: the child key sealed
//! with AES-256-GCM under `HKDF-SHA-256(parent key, "edge" ‖ parent ‖ child ‖
//! child version)`. Holding a node key therefore yields every key below it
//! and nothing above it.
//!
//! User level: a member's copy of a role key is a [`UserKeyWrap`] sealed
//! under a key derived from that user's [`PersonalSecret`].
//!
//! On revocation or structural change the whole downward closure of the
//! affected node is rekeyed, every token touching it is republished and wraps
//! of remaining members are reissued. Old key versions stay in a history so
//! that ciphertext written before a rotation stays readable (lazily
//! re-encrypted on the next write); history lookups require the current key.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::vec::Vec;
use core::fmt;

use ed25519_dalek::{SigningKey, VerifyingKey};
use rand_core::CryptoRngCore;
use serde::{Deserialize, Serialize};
use subtle::ConstantTimeEq;
use thiserror::Error;
use zeroize::{Zeroize, ZeroizeOnDrop};

use crate::crypto::{self, NONCE_LEN};
use crate::hierarchy::HierarchyGraph;
use crate::ids::{NodeId, UserId};

pub const KEY_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DlkmError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} already has a key")]
    KeyExists(NodeId),
    #[error("node {0} has no key")]
    MissingKey(NodeId),
    #[error("{parent} -> {child} is not an edge of the hierarchy")]
    UnknownEdge { parent: NodeId, child: NodeId },
    #[error("key version mismatch for {node}: current {current}, got {found}")]
    VersionMismatch {
        node: NodeId,
        current: u32,
        found: u32,
    },
    #[error("edge token {parent} -> {child} failed authenticated decryption")]
    TokenRejected { parent: NodeId, child: NodeId },
    #[error("no derivation path from {from} to {to}")]
    NotDerivable { from: NodeId, to: NodeId },
    #[error("key for {node} is version {held}, current is {current}")]
    StaleKey {
        node: NodeId,
        held: u32,
        current: u32,
    },
    #[error("user {user} does not hold role {role}")]
    NotAssigned { user: UserId, role: NodeId },
    #[error("key wrap does not belong to this user")]
    WrongUser,
    #[error("key wrap is for version {held}, current is {current}")]
    StaleWrap { held: u32, current: u32 },
    #[error("no key version {version} recorded for {node}")]
    UnknownVersion { node: NodeId, version: u32 },
    #[error("key history for {0} requires its current key")]
    HistoryDenied(NodeId),
    #[error("inconsistent key material: {0}")]
    Inconsistent(&'static str),
}

/// 32 bytes of secret key material, zeroized on drop and compared in constant time.
#[derive(Clone, Zeroize, ZeroizeOnDrop)]
pub struct SecretKey([u8; KEY_LEN]);

impl SecretKey {
    pub fn random(rng: &mut dyn CryptoRngCore) -> Self {
        Self(crypto::random_bytes32(rng))
    }

    pub fn from_bytes(bytes: [u8; KEY_LEN]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }
}

impl PartialEq for SecretKey {
    fn eq(&self, other: &Self) -> bool {
        self.0.ct_eq(&other.0).into()
    }
}

impl Eq for SecretKey {}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

/// A node's key at one version.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeKey {
    node: NodeId,
    version: u32,
    key: SecretKey,
}

impl NodeKey {
    pub fn new(node: NodeId, version: u32, key: SecretKey) -> Self {
        Self { node, version, key }
    }

    pub fn node(&self) -> &NodeId {
        &self.node
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn secret(&self) -> &SecretKey {
        &self.key
    }

    /// Purpose-bound 32-byte subkey (record encryption, transfer keys, ...).
    pub fn derive_subkey(&self, purpose: &str, context: &[&[u8]]) -> [u8; 32] {
        let version = self.version.to_be_bytes();
        let mut info: Vec<&[u8]> = Vec::with_capacity(context.len() + 4);
        info.extend_from_slice(&[
            b"subkey",
            purpose.as_bytes(),
            self.node.as_bytes(),
            &version,
        ]);
        info.extend_from_slice(context);
        crypto::hkdf32(self.key.as_bytes(), &info)
    }
}

/// Public ciphertext letting the holder of `parent`'s key recover `child`'s key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeToken {
    pub parent: NodeId,
    pub child: NodeId,
    pub parent_version: u32,
    pub child_version: u32,
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
}

fn edge_derivation_key(parent_key: &NodeKey, child: &NodeId, child_version: u32) -> [u8; 32] {
    crypto::hkdf32(
        parent_key.key.as_bytes(),
        &[
            b"edge",
            parent_key.node.as_bytes(),
            child.as_bytes(),
            &child_version.to_be_bytes(),
        ],
    )
}

fn edge_aad(parent: &NodeId, child: &NodeId, parent_version: u32, child_version: u32) -> Vec<u8> {
    crypto::length_prefixed(&[
        b"edge-token",
        parent.as_bytes(),
        child.as_bytes(),
        &parent_version.to_be_bytes(),
        &child_version.to_be_bytes(),
    ])
}

/// Seals `child_key` under a key derived from `parent_key`. Deterministic for a given nonce.
pub fn publish_edge_token(
    parent_key: &NodeKey,
    child_key: &NodeKey,
    nonce: [u8; NONCE_LEN],
) -> EdgeToken {
    let derivation = edge_derivation_key(parent_key, &child_key.node, child_key.version);
    let aad = edge_aad(
        &parent_key.node,
        &child_key.node,
        parent_key.version,
        child_key.version,
    );
    EdgeToken {
        parent: parent_key.node.clone(),
        child: child_key.node.clone(),
        parent_version: parent_key.version,
        child_version: child_key.version,
        nonce,
        ciphertext: crypto::aead_seal(&derivation, &nonce, &aad, child_key.key.as_bytes()),
    }
}

/// Recovers the child key from `token` using the parent's key.
pub fn open_edge_token(parent_key: &NodeKey, token: &EdgeToken) -> Result<NodeKey, DlkmError> {
    if token.parent != parent_key.node {
        return Err(DlkmError::UnknownEdge {
            parent: parent_key.node.clone(),
            child: token.child.clone(),
        });
    }
    if token.parent_version != parent_key.version {
        return Err(DlkmError::VersionMismatch {
            node: parent_key.node.clone(),
            current: token.parent_version,
            found: parent_key.version,
        });
    }
    let rejected = || DlkmError::TokenRejected {
        parent: token.parent.clone(),
        child: token.child.clone(),
    };
    let derivation = edge_derivation_key(parent_key, &token.child, token.child_version);
    let aad = edge_aad(
        &token.parent,
        &token.child,
        token.parent_version,
        token.child_version,
    );
    let plaintext = crypto::aead_open(&derivation, &token.nonce, &aad, &token.ciphertext)
        .ok_or_else(rejected)?;
    let bytes: [u8; KEY_LEN] = plaintext.as_slice().try_into().map_err(|_| rejected())?;
    Ok(NodeKey::new(
        token.child.clone(),
        token.child_version,
        SecretKey::from_bytes(bytes),
    ))
}

/// The public half of the key store: current edge tokens and current key versions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenSet {
    tokens: BTreeMap<NodeId, BTreeMap<NodeId, EdgeToken>>,
    versions: BTreeMap<NodeId, u32>,
}

impl TokenSet {
    pub fn get(&self, parent: &NodeId, child: &NodeId) -> Option<&EdgeToken> {
        self.tokens.get(parent)?.get(child)
    }

    /// Tokens leaving `parent`, ordered by child id.
    pub fn outgoing(&self, parent: &NodeId) -> impl Iterator<Item = &EdgeToken> {
        self.tokens.get(parent).into_iter().flat_map(|c| c.values())
    }

    pub fn iter(&self) -> impl Iterator<Item = &EdgeToken> {
        self.tokens.values().flat_map(|c| c.values())
    }

    pub fn len(&self) -> usize {
        self.tokens.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn current_version(&self, node: &NodeId) -> Option<u32> {
        self.versions.get(node).copied()
    }

    pub fn versions(&self) -> impl Iterator<Item = (&NodeId, u32)> {
        self.versions.iter().map(|(n, v)| (n, *v))
    }

    fn insert(&mut self, token: EdgeToken) {
        self.tokens
            .entry(token.parent.clone())
            .or_default()
            .insert(token.child.clone(), token);
    }

    #[cfg(test)]
    fn remove(&mut self, parent: &NodeId, child: &NodeId) -> bool {
        let Some(children) = self.tokens.get_mut(parent) else {
            return false;
        };
        let removed = children.remove(child).is_some();
        if children.is_empty() {
            self.tokens.remove(parent);
        }
        removed
    }

    fn retain(&mut self, mut keep: impl FnMut(&EdgeToken) -> bool) -> usize {
        let before = self.len();
        self.tokens.retain(|_, children| {
            children.retain(|_, token| keep(token));
            !children.is_empty()
        });
        before - self.len()
    }
}

/// Derives `target`'s current key from `start_key` by walking edge tokens.
///
/// Breadth-first, children in lexicographic order. Tokens that fail to open
/// are skipped. Succeeds iff `target` is reachable from the start node through
/// current tokens.
pub fn derive_key(
    start_key: &NodeKey,
    target: &NodeId,
    tokens: &TokenSet,
) -> Result<NodeKey, DlkmError> {
    let start = start_key.node();
    let current = tokens
        .current_version(start)
        .ok_or_else(|| DlkmError::UnknownNode(start.clone()))?;
    if current != start_key.version {
        return Err(DlkmError::StaleKey {
            node: start.clone(),
            held: start_key.version,
            current,
        });
    }
    if target == start {
        return Ok(start_key.clone());
    }
    let mut seen = BTreeSet::from([start.clone()]);
    let mut queue = VecDeque::from([start_key.clone()]);
    while let Some(key) = queue.pop_front() {
        for token in tokens.outgoing(key.node()) {
            if seen.contains(&token.child) {
                continue;
            }
            let Ok(child_key) = open_edge_token(&key, token) else {
                continue;
            };
            if &token.child == target {
                return Ok(child_key);
            }
            seen.insert(token.child.clone());
            queue.push_back(child_key);
        }
    }
    Err(DlkmError::NotDerivable {
        from: start.clone(),
        to: target.clone(),
    })
}

/// A user's long-term secrets: the key-wrapping secret and the Ed25519 signing key.
pub struct PersonalSecret {
    user: UserId,
    secret: SecretKey,
    signing: SigningKey,
}

impl PersonalSecret {
    pub fn generate(user: UserId, rng: &mut dyn CryptoRngCore) -> Self {
        let secret = SecretKey::random(rng);
        let mut seed = crypto::random_bytes32(rng);
        let signing = SigningKey::from_bytes(&seed);
        seed.zeroize();
        Self {
            user,
            secret,
            signing,
        }
    }

    pub fn from_parts(user: UserId, secret: [u8; KEY_LEN], signing_seed: [u8; 32]) -> Self {
        Self {
            user,
            secret: SecretKey::from_bytes(secret),
            signing: SigningKey::from_bytes(&signing_seed),
        }
    }

    pub fn user(&self) -> &UserId {
        &self.user
    }

    pub fn secret(&self) -> &SecretKey {
        &self.secret
    }

    pub fn signing_key(&self) -> &SigningKey {
        &self.signing
    }

    pub fn signing_seed(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.signing.verifying_key()
    }
}

impl fmt::Debug for PersonalSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PersonalSecret")
            .field("user", &self.user)
            .finish_non_exhaustive()
    }
}

/// Lookup of members' personal secrets, used to reissue wraps after a rotation.
pub trait SecretLookup {
    fn personal_secret(&self, user: &UserId) -> Option<&PersonalSecret>;
}

impl SecretLookup for BTreeMap<UserId, PersonalSecret> {
    fn personal_secret(&self, user: &UserId) -> Option<&PersonalSecret> {
        self.get(user)
    }
}

/// A role key sealed for one user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserKeyWrap {
    pub user: UserId,
    pub role: NodeId,
    pub role_version: u32,
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
}

fn wrap_key_and_aad(secret: &PersonalSecret, role: &NodeId, version: u32) -> ([u8; 32], Vec<u8>) {
    let version = version.to_be_bytes();
    let parts: [&[u8]; 4] = [
        b"user-wrap",
        secret.user.as_bytes(),
        role.as_bytes(),
        &version,
    ];
    (
        crypto::hkdf32(secret.secret.as_bytes(), &parts),
        crypto::length_prefixed(&parts),
    )
}

pub fn wrap_for_user(
    secret: &PersonalSecret,
    role_key: &NodeKey,
    rng: &mut dyn CryptoRngCore,
) -> UserKeyWrap {
    let (key, aad) = wrap_key_and_aad(secret, &role_key.node, role_key.version);
    let nonce = crypto::random_nonce(rng);
    UserKeyWrap {
        user: secret.user.clone(),
        role: role_key.node.clone(),
        role_version: role_key.version,
        nonce,
        ciphertext: crypto::aead_seal(&key, &nonce, &aad, role_key.key.as_bytes()),
    }
}

/// Opens `wrap` with the user's secret; wraps older than `current_version` are refused.
pub fn unwrap(
    secret: &PersonalSecret,
    wrap: &UserKeyWrap,
    current_version: u32,
) -> Result<NodeKey, DlkmError> {
    if wrap.role_version < current_version {
        return Err(DlkmError::StaleWrap {
            held: wrap.role_version,
            current: current_version,
        });
    }
    if wrap.user != secret.user {
        return Err(DlkmError::WrongUser);
    }
    let (key, aad) = wrap_key_and_aad(secret, &wrap.role, wrap.role_version);
    let plaintext =
        crypto::aead_open(&key, &wrap.nonce, &aad, &wrap.ciphertext).ok_or(DlkmError::WrongUser)?;
    let bytes: [u8; KEY_LEN] = plaintext
        .as_slice()
        .try_into()
        .map_err(|_| DlkmError::WrongUser)?;
    Ok(NodeKey::new(
        wrap.role.clone(),
        wrap.role_version,
        SecretKey::from_bytes(bytes),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RotationReason {
    UserRevoked,
    EdgeRemoved,
    NodeRemoved,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RekeyReport {
    pub reason: RotationReason,
    pub changed: NodeId,
    /// Every rotated node with its new version.
    pub rotated: BTreeMap<NodeId, u32>,
    pub tokens_republished: usize,
    pub tokens_dropped: usize,
    pub wraps_reissued: Vec<(UserId, NodeId)>,
    /// Wraps deleted because the user no longer holds the role.
    pub wraps_revoked: Vec<(UserId, NodeId)>,
    /// Members whose secret was unavailable; their wrap stays stale until reissued.
    pub wraps_pending: Vec<(UserId, NodeId)>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvisionReport {
    pub keys_generated: usize,
    pub tokens_published: usize,
    pub tokens_dropped: usize,
}

/// Server-side key table: current keys, version history, public tokens, user wraps.
#[derive(Debug, Clone, Default)]
pub struct KeyStore {
    current: BTreeMap<NodeId, NodeKey>,
    history: BTreeMap<NodeId, BTreeMap<u32, SecretKey>>,
    public: TokenSet,
    wraps: BTreeMap<(UserId, NodeId), UserKeyWrap>,
}

impl KeyStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds a store from persisted parts, checking that tokens and wraps
    /// refer to known key versions.
    pub fn from_parts(
        current: Vec<NodeKey>,
        history: Vec<NodeKey>,
        tokens: Vec<EdgeToken>,
        wraps: Vec<UserKeyWrap>,
    ) -> Result<Self, DlkmError> {
        let mut store = Self::new();
        for key in current {
            store.public.versions.insert(key.node.clone(), key.version);
            if store.current.insert(key.node.clone(), key).is_some() {
                return Err(DlkmError::Inconsistent("duplicate current key"));
            }
        }
        for key in history {
            if store
                .current
                .get(&key.node)
                .is_some_and(|c| c.version <= key.version)
            {
                return Err(DlkmError::Inconsistent(
                    "history version not older than current",
                ));
            }
            store
                .history
                .entry(key.node.clone())
                .or_default()
                .insert(key.version, key.key.clone());
        }
        for token in tokens {
            let parent_ok =
                store.public.current_version(&token.parent) == Some(token.parent_version);
            let child_ok = store.public.current_version(&token.child) == Some(token.child_version);
            if !(parent_ok && child_ok) {
                return Err(DlkmError::Inconsistent(
                    "token does not match current versions",
                ));
            }
            store.public.insert(token);
        }
        for wrap in wraps {
            store
                .wraps
                .insert((wrap.user.clone(), wrap.role.clone()), wrap);
        }
        Ok(store)
    }

    pub fn tokens(&self) -> &TokenSet {
        &self.public
    }

    pub fn node_key(&self, node: &NodeId) -> Option<&NodeKey> {
        self.current.get(node)
    }

    pub fn current_version(&self, node: &NodeId) -> Option<u32> {
        self.current.get(node).map(NodeKey::version)
    }

    pub fn current_keys(&self) -> impl Iterator<Item = &NodeKey> {
        self.current.values()
    }

    /// Retired key versions as `NodeKey`s (for persistence).
    pub fn history_keys(&self) -> impl Iterator<Item = NodeKey> + '_ {
        self.history.iter().flat_map(|(node, versions)| {
            versions
                .iter()
                .map(move |(v, key)| NodeKey::new(node.clone(), *v, key.clone()))
        })
    }

    pub fn wraps(&self) -> impl Iterator<Item = &UserKeyWrap> {
        self.wraps.values()
    }

    pub fn wrap_for(&self, user: &UserId, role: &NodeId) -> Option<&UserKeyWrap> {
        self.wraps.get(&(user.clone(), role.clone()))
    }

    pub fn generate_node_key(
        &mut self,
        graph: &HierarchyGraph,
        node: &NodeId,
        rng: &mut dyn CryptoRngCore,
    ) -> Result<&NodeKey, DlkmError> {
        if !graph.contains(node) {
            return Err(DlkmError::UnknownNode(node.clone()));
        }
        if self.current.contains_key(node) {
            return Err(DlkmError::KeyExists(node.clone()));
        }
        let version = self
            .history
            .get(node)
            .and_then(|h| h.keys().next_back())
            .map_or(1, |v| v + 1);
        Ok(self.install_key(NodeKey::new(node.clone(), version, SecretKey::random(rng))))
    }

    /// Publishes (or republishes) the token on the edge `parent → child` using current keys.
    pub fn publish(
        &mut self,
        graph: &HierarchyGraph,
        parent: &NodeId,
        child: &NodeId,
        rng: &mut dyn CryptoRngCore,
    ) -> Result<&EdgeToken, DlkmError> {
        if !graph.has_key_edge(parent, child) {
            return Err(DlkmError::UnknownEdge {
                parent: parent.clone(),
                child: child.clone(),
            });
        }
        let parent_key = self
            .current
            .get(parent)
            .ok_or_else(|| DlkmError::MissingKey(parent.clone()))?;
        let child_key = self
            .current
            .get(child)
            .ok_or_else(|| DlkmError::MissingKey(child.clone()))?;
        let token = publish_edge_token(parent_key, child_key, crypto::random_nonce(rng));
        self.public.insert(token);
        Ok(self.public.get(parent, child).expect("token just inserted"))
    }

    /// Installs an externally produced token after checking edge and versions.
    pub fn install_token(
        &mut self,
        graph: &HierarchyGraph,
        token: EdgeToken,
    ) -> Result<(), DlkmError> {
        if !graph.has_key_edge(&token.parent, &token.child) {
            return Err(DlkmError::UnknownEdge {
                parent: token.parent,
                child: token.child,
            });
        }
        for (node, version) in [
            (&token.parent, token.parent_version),
            (&token.child, token.child_version),
        ] {
            let current = self
                .current_version(node)
                .ok_or_else(|| DlkmError::MissingKey(node.clone()))?;
            if current != version {
                return Err(DlkmError::VersionMismatch {
                    node: node.clone(),
                    current,
                    found: version,
                });
            }
        }
        self.public.insert(token);
        Ok(())
    }

    /// Brings the store in line with `graph`: keys for new nodes, tokens for
    /// new edges, and no tokens for edges that no longer exist.
    pub fn provision(
        &mut self,
        graph: &HierarchyGraph,
        rng: &mut dyn CryptoRngCore,
    ) -> ProvisionReport {
        let mut report = ProvisionReport::default();
        let nodes: Vec<NodeId> = graph.roles().chain(graph.data_nodes()).cloned().collect();
        for node in &nodes {
            if !self.current.contains_key(node) {
                self.generate_node_key(graph, node, rng)
                    .expect("node is in graph and has no key");
                report.keys_generated += 1;
            }
        }
        report.tokens_dropped = self.drop_orphan_tokens(graph);
        let edges: Vec<(NodeId, NodeId)> = graph
            .key_edges()
            .map(|(p, c)| (p.clone(), c.clone()))
            .collect();
        for (parent, child) in edges {
            if !self.token_is_current(&parent, &child) {
                self.publish(graph, &parent, &child, rng)
                    .expect("edge exists and keys provisioned");
                report.tokens_published += 1;
            }
        }
        report
    }

    /// Drops every key, token and wrap of a node that left the hierarchy.
    /// Retired versions stay in history.
    pub fn forget_node(&mut self, node: &NodeId) {
        if let Some(key) = self.current.remove(node) {
            self.history
                .entry(node.clone())
                .or_default()
                .insert(key.version, key.key.clone());
        }
        self.public.versions.remove(node);
        self.public
            .retain(|t| &t.parent != node && &t.child != node);
        self.wraps.retain(|(_, role), _| role != node);
    }

    /// Seals the current key of `role` for a member.
    pub fn issue_wrap(
        &mut self,
        graph: &HierarchyGraph,
        secret: &PersonalSecret,
        role: &NodeId,
        rng: &mut dyn CryptoRngCore,
    ) -> Result<&UserKeyWrap, DlkmError> {
        if !graph.holds_role(secret.user(), role) {
            return Err(DlkmError::NotAssigned {
                user: secret.user().clone(),
                role: role.clone(),
            });
        }
        let role_key = self
            .current
            .get(role)
            .ok_or_else(|| DlkmError::MissingKey(role.clone()))?;
        let wrap = wrap_for_user(secret, role_key, rng);
        let slot = (secret.user().clone(), role.clone());
        self.wraps.insert(slot.clone(), wrap);
        Ok(&self.wraps[&slot])
    }

    pub fn drop_wrap(&mut self, user: &UserId, role: &NodeId) -> Option<UserKeyWrap> {
        self.wraps.remove(&(user.clone(), role.clone()))
    }

    /// Convenience: opens the user's wrap for `role`, refusing stale wraps.
    pub fn unwrap_role_key(
        &self,
        secret: &PersonalSecret,
        role: &NodeId,
    ) -> Result<NodeKey, DlkmError> {
        let wrap = self
            .wrap_for(secret.user(), role)
            .ok_or_else(|| DlkmError::NotAssigned {
                user: secret.user().clone(),
                role: role.clone(),
            })?;
        let current = self
            .current_version(role)
            .ok_or_else(|| DlkmError::MissingKey(role.clone()))?;
        unwrap(secret, wrap, current)
    }

    /// Returns the key of `node` at `version`; the caller proves access by
    /// presenting the node's current key.
    pub fn historical_key(
        &self,
        node: &NodeId,
        version: u32,
        proof: &NodeKey,
    ) -> Result<NodeKey, DlkmError> {
        let current = self
            .current
            .get(node)
            .ok_or_else(|| DlkmError::UnknownNode(node.clone()))?;
        if proof != current {
            return Err(DlkmError::HistoryDenied(node.clone()));
        }
        if version == current.version {
            return Ok(current.clone());
        }
        self.history
            .get(node)
            .and_then(|h| h.get(&version))
            .map(|key| NodeKey::new(node.clone(), version, key.clone()))
            .ok_or(DlkmError::UnknownVersion {
                node: node.clone(),
                version,
            })
    }

    /// Rekeys `changed` and its whole downward closure after a hierarchy
    /// mutation has been applied to `graph`.
    pub fn rotate_on_change(
        &mut self,
        graph: &HierarchyGraph,
        changed: &NodeId,
        reason: RotationReason,
        secrets: &dyn SecretLookup,
        rng: &mut dyn CryptoRngCore,
    ) -> Result<RekeyReport, DlkmError> {
        let closure = graph
            .key_closure(changed)
            .map_err(|_| DlkmError::UnknownNode(changed.clone()))?;

        let mut rotated = BTreeMap::new();
        for node in &closure {
            let version = match self.current.remove(node) {
                Some(old) => {
                    self.history
                        .entry(node.clone())
                        .or_default()
                        .insert(old.version, old.key.clone());
                    old.version + 1
                }
                None => 1,
            };
            self.install_key(NodeKey::new(node.clone(), version, SecretKey::random(rng)));
            rotated.insert(node.clone(), version);
        }

        let tokens_dropped = self.drop_orphan_tokens(graph);
        let touching: Vec<(NodeId, NodeId)> = graph
            .key_edges()
            .filter(|(p, c)| closure.contains(*p) || closure.contains(*c))
            .map(|(p, c)| (p.clone(), c.clone()))
            .collect();
        for (parent, child) in &touching {
            self.publish(graph, parent, child, rng)?;
        }

        let mut wraps_revoked = Vec::new();
        self.wraps.retain(|(user, role), _| {
            let keep = graph.holds_role(user, role);
            if !keep {
                wraps_revoked.push((user.clone(), role.clone()));
            }
            keep
        });

        let mut wraps_reissued = Vec::new();
        let mut wraps_pending = Vec::new();
        let members: Vec<(UserId, NodeId)> = graph
            .users()
            .flat_map(|(user, roles)| roles.iter().map(move |r| (user.clone(), r.clone())))
            .filter(|(_, role)| closure.contains(role))
            .collect();
        for (user, role) in members {
            match secrets.personal_secret(&user) {
                Some(secret) => {
                    self.issue_wrap(graph, secret, &role, rng)?;
                    wraps_reissued.push((user, role));
                }
                None => wraps_pending.push((user, role)),
            }
        }

        Ok(RekeyReport {
            reason,
            changed: changed.clone(),
            rotated,
            tokens_republished: touching.len(),
            tokens_dropped,
            wraps_reissued,
            wraps_revoked,
            wraps_pending,
        })
    }

    fn install_key(&mut self, key: NodeKey) -> &NodeKey {
        let node = key.node.clone();
        self.public.versions.insert(node.clone(), key.version);
        self.current.insert(node.clone(), key);
        &self.current[&node]
    }

    fn token_is_current(&self, parent: &NodeId, child: &NodeId) -> bool {
        self.public.get(parent, child).is_some_and(|t| {
            Some(t.parent_version) == self.current_version(parent)
                && Some(t.child_version) == self.current_version(child)
        })
    }

    fn drop_orphan_tokens(&mut self, graph: &HierarchyGraph) -> usize {
        self.public
            .retain(|t| graph.has_key_edge(&t.parent, &t.child))
    }

    #[cfg(test)]
    fn remove_token(&mut self, parent: &NodeId, child: &NodeId) -> bool {
        self.public.remove(parent, child)
    }
}
