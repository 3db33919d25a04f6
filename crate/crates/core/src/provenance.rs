//! Secure data provenance.
//!
//! Every data object has a linear chain of [`ProvenanceRecord`]s. A record's
//! canonical form is the concatenation of its fields in declared order, each
//! prefixed by its big-endian u32 length:
//!
//! | field       | encoding                         |
//! |-------------|----------------------------------|
//! | seq         | u64 big-endian (8 bytes)          |
//! | data_ref    | UTF-8                             |
//! | actor       | UTF-8                             |
//! | role        | UTF-8                             |
//! | op_kind     | ASCII name (`create`, `read`, ...) |
//! | state_hash  | 32 bytes                          |
//! | prev_hash   | 32 bytes                          |
//! | timestamp   | u64 big-endian Unix seconds (UTC) |
//! | signature   | 64-byte Ed25519 signature         |
//!
//! The signature covers the canonical encoding of the first eight fields;
//! `prev_hash` is SHA-256 of the previous record's full canonical encoding
//! (32 zero bytes for the genesis record).
//!
//! Transfers travel in a [`TransferEnvelope`]: AES-256-GCM ciphertext plus an
//! HMAC-SHA-256 over header and ciphertext that is checked before any
//! decryption is attempted.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use rand_core::CryptoRngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, NONCE_LEN};
use crate::ids::{NodeId, UserId};

pub const HASH_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;
pub const GENESIS_PREV_HASH: [u8; HASH_LEN] = [0; HASH_LEN];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Create,
    Read,
    Update,
    Export,
    Transfer,
}

impl OpKind {
    pub const ALL: [OpKind; 5] = [
        OpKind::Create,
        OpKind::Read,
        OpKind::Update,
        OpKind::Export,
        OpKind::Transfer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Create => "create",
            OpKind::Read => "read",
            OpKind::Update => "update",
            OpKind::Export => "export",
            OpKind::Transfer => "transfer",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OpKind {
    type Err = ProvenanceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or(ProvenanceError::Malformed("unknown op_kind"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProvenanceError {
    #[error("chain is invalid at record {seq}: {reason}")]
    InvalidChain { seq: u64, reason: FailureReason },
    #[error("malformed record: {0}")]
    Malformed(&'static str),
}

/// Why verification stopped at a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureReason {
    /// `seq` is not the record's position.
    Sequence,
    /// `prev_hash` does not match the previous record.
    Link,
    /// The signature does not verify under the actor's key.
    Signature,
    /// No verifying key is registered for the actor.
    UnknownActor,
    /// The serialized bytes do not parse.
    Malformed,
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FailureReason::Sequence => "sequence",
            FailureReason::Link => "link",
            FailureReason::Signature => "signature",
            FailureReason::UnknownActor => "unknown actor",
            FailureReason::Malformed => "malformed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Verdict {
    Valid,
    Invalid {
        first_bad_seq: u64,
        reason: FailureReason,
    },
}

impl Verdict {
    pub fn is_valid(&self) -> bool {
        matches!(self, Verdict::Valid)
    }
}

/// Fields of a record before it is sequenced, linked and signed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewRecord {
    pub data_ref: String,
    pub actor: UserId,
    pub role: NodeId,
    pub op_kind: OpKind,
    pub state_hash: [u8; HASH_LEN],
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProvenanceRecord {
    pub seq: u64,
    pub data_ref: String,
    pub actor: UserId,
    pub role: NodeId,
    pub op_kind: OpKind,
    pub state_hash: [u8; HASH_LEN],
    pub prev_hash: [u8; HASH_LEN],
    pub timestamp: u64,
    pub signature: [u8; SIGNATURE_LEN],
}

impl ProvenanceRecord {
    /// Canonical encoding of every field except the signature.
    pub fn signing_bytes(&self) -> Vec<u8> {
        let seq = self.seq.to_be_bytes();
        let timestamp = self.timestamp.to_be_bytes();
        crypto::length_prefixed(&[
            &seq,
            self.data_ref.as_bytes(),
            self.actor.as_bytes(),
            self.role.as_bytes(),
            self.op_kind.as_str().as_bytes(),
            &self.state_hash,
            &self.prev_hash,
            &timestamp,
        ])
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = self.signing_bytes();
        crypto::push_length_prefixed(&mut out, &self.signature);
        out
    }

    /// SHA-256 of the canonical encoding; the next record's `prev_hash`.
    pub fn hash(&self) -> [u8; HASH_LEN] {
        crypto::sha256(&self.canonical_bytes())
    }

    /// Strict inverse of [`canonical_bytes`](Self::canonical_bytes).
    pub fn from_canonical(bytes: &[u8]) -> Result<Self, ProvenanceError> {
        let mut reader = FieldReader { rest: bytes };
        let seq = u64::from_be_bytes(reader.fixed::<8>("seq")?);
        let data_ref = reader.utf8("data_ref")?;
        let actor = UserId::from(reader.utf8("actor")?);
        let role = NodeId::from(reader.utf8("role")?);
        let op_kind = reader.utf8("op_kind")?.parse()?;
        let state_hash = reader.fixed::<HASH_LEN>("state_hash")?;
        let prev_hash = reader.fixed::<HASH_LEN>("prev_hash")?;
        let timestamp = u64::from_be_bytes(reader.fixed::<8>("timestamp")?);
        let signature = reader.fixed::<SIGNATURE_LEN>("signature")?;
        if !reader.rest.is_empty() {
            return Err(ProvenanceError::Malformed("trailing bytes"));
        }
        Ok(Self {
            seq,
            data_ref,
            actor,
            role,
            op_kind,
            state_hash,
            prev_hash,
            timestamp,
            signature,
        })
    }

    fn verify_signature(&self, key: &VerifyingKey) -> bool {
        let signature = Signature::from_bytes(&self.signature);
        key.verify_strict(&self.signing_bytes(), &signature).is_ok()
    }
}

struct FieldReader<'a> {
    rest: &'a [u8],
}

impl<'a> FieldReader<'a> {
    fn field(&mut self, name: &'static str) -> Result<&'a [u8], ProvenanceError> {
        let malformed = || ProvenanceError::Malformed(name);
        let (len, rest) = self.rest.split_first_chunk::<4>().ok_or_else(malformed)?;
        let len = u32::from_be_bytes(*len) as usize;
        if rest.len() < len {
            return Err(malformed());
        }
        let (value, rest) = rest.split_at(len);
        self.rest = rest;
        Ok(value)
    }

    fn fixed<const N: usize>(&mut self, name: &'static str) -> Result<[u8; N], ProvenanceError> {
        self.field(name)?
            .try_into()
            .map_err(|_| ProvenanceError::Malformed(name))
    }

    fn utf8(&mut self, name: &'static str) -> Result<String, ProvenanceError> {
        let bytes = self.field(name)?;
        core::str::from_utf8(bytes)
            .map(String::from)
            .map_err(|_| ProvenanceError::Malformed(name))
    }
}

/// Registered verifying keys of actors.
pub trait KeyDirectory {
    fn verifying_key(&self, user: &UserId) -> Option<VerifyingKey>;
}

impl KeyDirectory for BTreeMap<UserId, VerifyingKey> {
    fn verifying_key(&self, user: &UserId) -> Option<VerifyingKey> {
        self.get(user).copied()
    }
}

/// An append-only chain for one data object.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProvenanceChain {
    records: Vec<ProvenanceRecord>,
    /// Prefix length whose seq and links have been checked.
    linked: usize,
}

impl ProvenanceChain {
    pub fn new() -> Self {
        Self::default()
    }

    /// Wraps records loaded from storage; links are checked on the next append.
    pub fn from_records(records: Vec<ProvenanceRecord>) -> Self {
        Self { records, linked: 0 }
    }

    pub fn records(&self) -> &[ProvenanceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Hash of the last record, or the genesis value for an empty chain.
    pub fn head_hash(&self) -> [u8; HASH_LEN] {
        self.records
            .last()
            .map_or(GENESIS_PREV_HASH, ProvenanceRecord::hash)
    }

    /// Sequences, links and signs `entry`, then appends it.
    pub fn append(
        &mut self,
        entry: NewRecord,
        signer: &SigningKey,
    ) -> Result<&ProvenanceRecord, ProvenanceError> {
        self.check_links()?;
        let mut record = ProvenanceRecord {
            seq: self.records.len() as u64,
            data_ref: entry.data_ref,
            actor: entry.actor,
            role: entry.role,
            op_kind: entry.op_kind,
            state_hash: entry.state_hash,
            prev_hash: self.head_hash(),
            timestamp: entry.timestamp,
            signature: [0; SIGNATURE_LEN],
        };
        record.signature = signer.sign(&record.signing_bytes()).to_bytes();
        self.records.push(record);
        self.linked = self.records.len();
        Ok(self.records.last().expect("just pushed"))
    }

    fn check_links(&mut self) -> Result<(), ProvenanceError> {
        while self.linked < self.records.len() {
            let i = self.linked;
            let record = &self.records[i];
            if record.seq != i as u64 {
                return Err(ProvenanceError::InvalidChain {
                    seq: i as u64,
                    reason: FailureReason::Sequence,
                });
            }
            let expected = if i == 0 {
                GENESIS_PREV_HASH
            } else {
                self.records[i - 1].hash()
            };
            if record.prev_hash != expected {
                return Err(ProvenanceError::InvalidChain {
                    seq: i as u64,
                    reason: FailureReason::Link,
                });
            }
            self.linked += 1;
        }
        Ok(())
    }
}

/// Checks sequence numbers, hash links and signatures, reporting the first failure.
pub fn verify_chain(records: &[ProvenanceRecord], keys: &dyn KeyDirectory) -> Verdict {
    let mut expected_prev = GENESIS_PREV_HASH;
    for (i, record) in records.iter().enumerate() {
        let position = i as u64;
        let invalid = |reason| Verdict::Invalid {
            first_bad_seq: position,
            reason,
        };
        if record.seq != position {
            return invalid(FailureReason::Sequence);
        }
        if record.prev_hash != expected_prev {
            return invalid(FailureReason::Link);
        }
        let Some(key) = keys.verifying_key(&record.actor) else {
            return invalid(FailureReason::UnknownActor);
        };
        if !record.verify_signature(&key) {
            return invalid(FailureReason::Signature);
        }
        expected_prev = record.hash();
    }
    Verdict::Valid
}

/// Like [`verify_chain`] but over serialized records, so that unparseable
/// bytes are localized too.
pub fn verify_serialized<B: AsRef<[u8]>>(records: &[B], keys: &dyn KeyDirectory) -> Verdict {
    let mut parsed = Vec::with_capacity(records.len());
    for (i, bytes) in records.iter().enumerate() {
        match ProvenanceRecord::from_canonical(bytes.as_ref()) {
            Ok(record) => parsed.push(record),
            Err(_) => {
                // Earlier records may already be broken; report whichever comes first.
                return match verify_chain(&parsed, keys) {
                    Verdict::Valid => Verdict::Invalid {
                        first_bad_seq: i as u64,
                        reason: FailureReason::Malformed,
                    },
                    invalid => invalid,
                };
            }
        }
    }
    verify_chain(&parsed, keys)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum TransferError {
    #[error("transfer MAC verification failed")]
    MacFailure,
    #[error("transfer payload failed to decrypt")]
    DecryptFailure,
}

/// Encrypted and MACed payload for a network transfer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferEnvelope {
    pub sender: UserId,
    pub receiver: UserId,
    pub chain_head_hash: [u8; HASH_LEN],
    pub nonce: [u8; NONCE_LEN],
    pub payload: Vec<u8>,
    pub mac: [u8; 32],
}

fn transfer_keys(shared_key: &[u8; 32]) -> ([u8; 32], [u8; 32]) {
    (
        crypto::hkdf32(shared_key, &[b"transfer", b"enc"]),
        crypto::hkdf32(shared_key, &[b"transfer", b"mac"]),
    )
}

impl TransferEnvelope {
    pub fn header_bytes(&self) -> Vec<u8> {
        crypto::length_prefixed(&[
            b"transfer-envelope",
            self.sender.as_bytes(),
            self.receiver.as_bytes(),
            &self.chain_head_hash,
            &self.nonce,
        ])
    }

    fn mac_input(&self) -> Vec<u8> {
        let mut input = self.header_bytes();
        crypto::push_length_prefixed(&mut input, &self.payload);
        input
    }

    pub fn verify_mac(&self, shared_key: &[u8; 32]) -> Result<(), TransferError> {
        let (_, mac_key) = transfer_keys(shared_key);
        if crypto::hmac_sha256_verify(&mac_key, &self.mac_input(), &self.mac) {
            Ok(())
        } else {
            Err(TransferError::MacFailure)
        }
    }

    /// Decrypts without checking the MAC. [`open_transfer`] is the normal entry point.
    pub fn decrypt(&self, shared_key: &[u8; 32]) -> Result<Vec<u8>, TransferError> {
        let (enc_key, _) = transfer_keys(shared_key);
        crypto::aead_open(&enc_key, &self.nonce, &self.header_bytes(), &self.payload)
            .ok_or(TransferError::DecryptFailure)
    }
}

pub fn seal_transfer(
    payload: &[u8],
    shared_key: &[u8; 32],
    sender: UserId,
    receiver: UserId,
    chain_head_hash: [u8; HASH_LEN],
    rng: &mut dyn CryptoRngCore,
) -> TransferEnvelope {
    let (enc_key, mac_key) = transfer_keys(shared_key);
    let mut envelope = TransferEnvelope {
        sender,
        receiver,
        chain_head_hash,
        nonce: crypto::random_nonce(rng),
        payload: Vec::new(),
        mac: [0; 32],
    };
    envelope.payload =
        crypto::aead_seal(&enc_key, &envelope.nonce, &envelope.header_bytes(), payload);
    envelope.mac = crypto::hmac_sha256(&mac_key, &envelope.mac_input());
    envelope
}

/// Verifies the MAC, then decrypts.
pub fn open_transfer(
    envelope: &TransferEnvelope,
    shared_key: &[u8; 32],
) -> Result<Vec<u8>, TransferError> {
    envelope.verify_mac(shared_key)?;
    envelope.decrypt(shared_key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha20Rng;
    use rand_core::SeedableRng;

    fn signer(seed: u8) -> SigningKey {
        SigningKey::from_bytes(&[seed; 32])
    }

    fn entry(i: u64, op: OpKind) -> NewRecord {
        NewRecord {
            data_ref: "rec-0001".into(),
            actor: UserId::from("dr_smith"),
            role: NodeId::from("Physician"),
            op_kind: op,
            state_hash: crypto::sha256(&i.to_be_bytes()),
            timestamp: 1_600_000_000 + i,
        }
    }

    fn keys() -> BTreeMap<UserId, VerifyingKey> {
        BTreeMap::from([(UserId::from("dr_smith"), signer(1).verifying_key())])
    }

    #[test]
    fn genesis_then_linked_append() {
        let mut chain = ProvenanceChain::new();
        let genesis = chain
            .append(entry(0, OpKind::Create), &signer(1))
            .unwrap()
            .clone();
        assert_eq!(genesis.seq, 0);
        assert_eq!(genesis.prev_hash, [0; 32]);
        let second = chain
            .append(entry(1, OpKind::Update), &signer(1))
            .unwrap()
            .clone();
        assert_eq!(second.seq, 1);
        // Recompute the link from raw canonical bytes with sha2 directly.
        use sha2::{Digest, Sha256};
        let expected: [u8; 32] = Sha256::digest(genesis.canonical_bytes()).into();
        assert_eq!(second.prev_hash, expected);
        assert_eq!(verify_chain(chain.records(), &keys()), Verdict::Valid);
    }

    #[test]
    fn append_refuses_broken_chain() {
        let mut chain = ProvenanceChain::new();
        chain.append(entry(0, OpKind::Create), &signer(1)).unwrap();
        chain.append(entry(1, OpKind::Update), &signer(1)).unwrap();
        let mut records = chain.records().to_vec();
        records[1].prev_hash[0] ^= 1;
        let mut broken = ProvenanceChain::from_records(records);
        assert_eq!(
            broken.append(entry(2, OpKind::Read), &signer(1)),
            Err(ProvenanceError::InvalidChain {
                seq: 1,
                reason: FailureReason::Link
            })
        );
    }

    #[test]
    fn empty_chain_is_valid() {
        assert_eq!(verify_chain(&[], &keys()), Verdict::Valid);
        assert_eq!(verify_serialized::<Vec<u8>>(&[], &keys()), Verdict::Valid);
    }

    #[test]
    fn wrong_signer_and_unknown_actor() {
        let mut chain = ProvenanceChain::new();
        chain.append(entry(0, OpKind::Create), &signer(1)).unwrap();
        chain.append(entry(1, OpKind::Update), &signer(2)).unwrap();
        assert_eq!(
            verify_chain(chain.records(), &keys()),
            Verdict::Invalid {
                first_bad_seq: 1,
                reason: FailureReason::Signature
            }
        );
        let empty: BTreeMap<UserId, VerifyingKey> = BTreeMap::new();
        assert_eq!(
            verify_chain(chain.records(), &empty),
            Verdict::Invalid {
                first_bad_seq: 0,
                reason: FailureReason::UnknownActor
            }
        );
    }

    #[test]
    fn canonical_round_trip_and_strictness() {
        let mut chain = ProvenanceChain::new();
        let record = chain
            .append(entry(0, OpKind::Export), &signer(1))
            .unwrap()
            .clone();
        let bytes = record.canonical_bytes();
        assert_eq!(ProvenanceRecord::from_canonical(&bytes).unwrap(), record);
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(ProvenanceRecord::from_canonical(&trailing).is_err());
        assert!(ProvenanceRecord::from_canonical(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn transfer_round_trip_and_tamper() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let key = [5u8; 32];
        let env = seal_transfer(
            b"cohort export",
            &key,
            "a".into(),
            "b".into(),
            [9; 32],
            &mut rng,
        );
        assert_eq!(open_transfer(&env, &key).unwrap(), b"cohort export");

        let mut tampered = env.clone();
        tampered.payload[0] ^= 1;
        assert_eq!(
            open_transfer(&tampered, &key),
            Err(TransferError::MacFailure)
        );

        let mut rerouted = env.clone();
        rerouted.receiver = "mallory".into();
        assert_eq!(
            open_transfer(&rerouted, &key),
            Err(TransferError::MacFailure)
        );
    }

    #[test]
    fn mac_is_checked_before_decryption() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let key = [5u8; 32];
        let wrong = [6u8; 32];
        let env = seal_transfer(&[1, 2, 3], &key, "a".into(), "b".into(), [0; 32], &mut rng);
        // Through the contract: the MAC fails first.
        assert_eq!(open_transfer(&env, &wrong), Err(TransferError::MacFailure));
        // Skipping the MAC shows the other failure mode, so the order is observable.
        assert_eq!(env.decrypt(&wrong), Err(TransferError::DecryptFailure));
    }
}
