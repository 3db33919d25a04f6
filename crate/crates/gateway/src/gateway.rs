//! The gateway service: one object owning all module state, a request
//! router, audit logging and write-through persistence.

use std::collections::{BTreeMap, BTreeSet};

use dynaswap_core::biocap::{
    synth_sample, BiocapError, CapsuleRegistry, FeatureVector, SessionError, SessionGrant,
    SessionTable,
};
use dynaswap_core::dlkm::{
    DlkmError, KeyStore, NodeKey, PersonalSecret, RekeyReport, RotationReason, SecretKey,
    SecretLookup,
};
use dynaswap_core::hierarchy::{HierarchyError, HierarchyGraph, NodeKind};
use dynaswap_core::provenance::{
    seal_transfer, verify_serialized, ProvenanceRecord, TransferEnvelope, TransferError, Verdict,
};
use dynaswap_core::recordstore::{AccessEnv, ClinicalRecord, RecordError, RecordStore, Requester};
use dynaswap_core::{NodeId, UserId};
use ed25519_dalek::VerifyingKey;
use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use serde_json::{json, Value};

use crate::api::{AdminOp, ErrorKind, PresentedKey, Request, Response};
use crate::audit::{AuditError, AuditLog, AuditReport, Outcome};
use crate::codec::parse_hex32;
use crate::config::{Config, ConfigError, MasterKey};
use crate::persist::{valid_object_id, ClientSecrets, EnvelopeJson, InboxItem, Store, StoreError};
use crate::ratelimit::RateLimiter;
use crate::scanner::RegexScanner;

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Audit(#[from] AuditError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    System,
    /// Fixed time in Unix seconds, moved only by [`Gateway::advance`].
    Manual(u64),
}

/// A failed request before it is turned into a [`Response`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub kind: ErrorKind,
    pub message: String,
    pub check: Option<&'static str>,
}

impl Failure {
    fn new(kind: ErrorKind, message: impl Into<String>, check: Option<&'static str>) -> Self {
        Self {
            kind,
            message: message.into(),
            check,
        }
    }

    fn auth(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::AuthRequired, message, Some("session"))
    }

    fn unauthorized(message: impl Into<String>, check: &'static str) -> Self {
        Self::new(ErrorKind::Unauthorized, message, Some(check))
    }

    fn integrity(message: impl Into<String>, check: &'static str) -> Self {
        Self::new(ErrorKind::Integrity, message, Some(check))
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::BadRequest, message, None)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::NotFound, message, None)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Internal, message, None)
    }
}

impl From<HierarchyError> for Failure {
    fn from(e: HierarchyError) -> Self {
        match e {
            HierarchyError::UnknownNode(_) | HierarchyError::UnknownUser(_) => {
                Failure::not_found(e.to_string())
            }
            _ => Failure::bad_request(e.to_string()),
        }
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        Failure::internal(e.to_string())
    }
}

fn biocap_failure(e: BiocapError) -> Failure {
    match e {
        BiocapError::NotAssigned { .. } => Failure::unauthorized(e.to_string(), "role-assignment"),
        BiocapError::MatchBelowThreshold { .. } => {
            Failure::unauthorized("biometric match failed", "biometric")
        }
        BiocapError::NotEnrolled { .. }
        | BiocapError::StaleCapsule
        | BiocapError::NoActiveRs(_) => Failure::unauthorized(e.to_string(), "capsule"),
        BiocapError::UnknownRole(_) => Failure::not_found(e.to_string()),
        _ => Failure::bad_request(e.to_string()),
    }
}

fn record_failure(e: RecordError) -> Failure {
    match e {
        RecordError::ExpiredSession => Failure::auth("session expired"),
        RecordError::Unauthorized(reason) => {
            let check = match reason {
                dynaswap_core::recordstore::DenyReason::RoleNotHeld => "role-not-held",
                dynaswap_core::recordstore::DenyReason::NotReachable => "not-reachable",
                dynaswap_core::recordstore::DenyReason::KeyNotDerivable => "key-not-derivable",
                dynaswap_core::recordstore::DenyReason::NotAttending => "care-scope",
            };
            Failure::unauthorized(reason.to_string(), check)
        }
        RecordError::UnknownDataNode(_)
        | RecordError::UnknownRecord(_)
        | RecordError::UnknownCohort(_) => Failure::not_found(e.to_string()),
        RecordError::InvalidRecord(_) => Failure::bad_request(e.to_string()),
        RecordError::Corrupt(_) => Failure::integrity(e.to_string(), "record-aead"),
        RecordError::Key(_) => Failure::unauthorized(e.to_string(), "key"),
        RecordError::Provenance(_) => Failure::integrity(e.to_string(), "provenance"),
        RecordError::ResidualIdentifier { .. } => {
            Failure::unauthorized(e.to_string(), "residual-identifier")
        }
    }
}

fn dlkm_failure(e: DlkmError) -> Failure {
    match e {
        DlkmError::StaleWrap { .. } | DlkmError::WrongUser | DlkmError::NotAssigned { .. } => {
            Failure::unauthorized(e.to_string(), "key-wrap")
        }
        DlkmError::UnknownNode(_) | DlkmError::UnknownEdge { .. } => {
            Failure::not_found(e.to_string())
        }
        _ => Failure::internal(e.to_string()),
    }
}

/// Who a request ran as, for the audit entry.
struct AuditCtx {
    actor: String,
    role: String,
    endpoint: String,
}

impl AuditCtx {
    fn new(endpoint: &str) -> Self {
        Self {
            actor: "-".into(),
            role: "-".into(),
            endpoint: endpoint.into(),
        }
    }

    fn bind(&mut self, grant: &SessionGrant) {
        self.actor = grant.user.to_string();
        self.role = grant.role.to_string();
    }
}

struct ClientLookup<'a>(&'a BTreeMap<UserId, ClientSecrets>);

impl SecretLookup for ClientLookup<'_> {
    fn personal_secret(&self, user: &UserId) -> Option<&PersonalSecret> {
        self.0.get(user).map(|c| &c.personal)
    }
}

pub struct Gateway {
    config: Config,
    store: Store,
    graph: HierarchyGraph,
    keys: KeyStore,
    capsules: CapsuleRegistry,
    sessions: SessionTable,
    records: RecordStore,
    clients: BTreeMap<UserId, ClientSecrets>,
    pubkeys: BTreeMap<UserId, VerifyingKey>,
    inbox: Vec<InboxItem>,
    audit: AuditLog,
    limiter: RateLimiter,
    scanner: RegexScanner,
    clock: Clock,
    rng: ChaCha20Rng,
    dirty: bool,
}

impl Gateway {
    /// Opens (or starts) the store named in `config`.
    pub fn open(config: Config, master: MasterKey, clock: Clock) -> Result<Self, GatewayError> {
        config.validate()?;
        let audit_key = master.subkey("audit", &[]);
        let mut store = Store::new(&config.store, master);
        let loaded = store.load()?;
        let audit = AuditLog::open(&store.audit_dir(), audit_key)?;
        let mut records = RecordStore::from_parts(loaded.records, loaded.chains, loaded.cohorts);
        records.set_audit_reads(config.audit.audit_reads);
        for role in loaded.care_scoped {
            records.set_care_scoped(role, true);
        }
        let mut sessions = SessionTable::new();
        for grant in loaded.sessions {
            sessions.insert(grant);
        }
        let rng = match config.rng_seed {
            Some(seed) => ChaCha20Rng::seed_from_u64(seed),
            None => ChaCha20Rng::from_entropy(),
        };
        let limiter = RateLimiter::new(
            config.rate_limit.capacity,
            config.rate_limit.refill_per_sec,
            config.rate_limit.max_clients,
        );
        Ok(Self {
            config,
            store,
            graph: loaded.graph,
            keys: loaded.keys,
            capsules: loaded.capsules,
            sessions,
            records,
            clients: loaded.vault,
            pubkeys: loaded.pubkeys,
            inbox: loaded.inbox,
            audit,
            limiter,
            scanner: RegexScanner::new(),
            clock,
            rng,
            dirty: false,
        })
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn graph(&self) -> &HierarchyGraph {
        &self.graph
    }

    pub fn keys(&self) -> &KeyStore {
        &self.keys
    }

    pub fn records(&self) -> &RecordStore {
        &self.records
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn pubkeys(&self) -> &BTreeMap<UserId, VerifyingKey> {
        &self.pubkeys
    }

    pub fn now(&self) -> u64 {
        match self.clock {
            Clock::System => std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            Clock::Manual(t) => t,
        }
    }

    /// Moves a manual clock forward; no effect on the system clock.
    pub fn advance(&mut self, secs: u64) {
        if let Clock::Manual(t) = &mut self.clock {
            *t += secs;
        }
    }

    /// Turns the transfer MAC check on or off (fault-injection runs only).
    pub fn set_skip_transfer_mac(&mut self, skip: bool) {
        self.config.faults.skip_transfer_mac = skip;
    }

    pub fn audit_report(&self) -> Result<AuditReport, AuditError> {
        self.audit.verify()
    }

    pub fn audit_log(&self) -> &AuditLog {
        &self.audit
    }

    /// Envelopes on the simulated network path, exposed so that evaluation
    /// runs can play the network adversary. Not reachable through any endpoint.
    pub fn in_flight_mut(&mut self) -> &mut Vec<InboxItem> {
        &mut self.inbox
    }

    // ---- simulated client side ----

    /// A fresh capture from the user's simulated biometric source.
    pub fn capture_sample(&mut self, user: &UserId) -> Option<Vec<f64>> {
        let seed = self.clients.get(user)?.biometric_seed;
        let draw = self.rng.next_u64();
        Some(
            synth_sample(
                seed,
                draw,
                self.config.biocap.capture_sigma,
                self.config.biocap.dim,
            )
            .into_inner(),
        )
    }

    pub fn enrollment_samples(&mut self, user: &UserId, count: usize) -> Option<Vec<Vec<f64>>> {
        (0..count).map(|_| self.capture_sample(user)).collect()
    }

    /// The role key the user's client would unwrap from its current wrap.
    pub fn client_role_key(&self, user: &UserId, role: &NodeId) -> Option<PresentedKey> {
        let client = self.clients.get(user)?;
        let key = self.keys.unwrap_role_key(&client.personal, role).ok()?;
        Some(PresentedKey {
            node: key.node().clone(),
            version: key.version(),
            key: hex::encode(key.secret().as_bytes()),
        })
    }

    // ---- request handling ----

    /// Parses and handles one JSON request body.
    pub fn handle_json(&mut self, client: &str, body: &str) -> Response {
        match serde_json::from_str::<Request>(body) {
            Ok(request) => self.handle(client, request),
            Err(err) => {
                let endpoint = serde_json::from_str::<Value>(body)
                    .ok()
                    .and_then(|v| {
                        v.get("endpoint")
                            .and_then(Value::as_str)
                            .map(str::to_string)
                    })
                    .filter(|e| {
                        e.len() <= 64 && e.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_')
                    })
                    .unwrap_or_else(|| "unparsed".into());
                let mut ctx = AuditCtx::new(&endpoint);
                if !self.limiter.allow(client, self.now()) {
                    return self.finish(&mut ctx, Err(Self::rate_limited()));
                }
                // The audit detail stays generic: parser messages can echo request content.
                let response = Response::failure(
                    ErrorKind::BadRequest,
                    format!("malformed request: {err}"),
                    None,
                );
                match self.audit_append(&ctx, Outcome::Deny, "bad_request: malformed request") {
                    Ok(()) => response,
                    Err(f) => Response::failure(f.kind, f.message, f.check),
                }
            }
        }
    }

    pub fn handle(&mut self, client: &str, request: Request) -> Response {
        let mut ctx = AuditCtx::new(request.endpoint());
        if !self.limiter.allow(client, self.now()) {
            return self.finish(&mut ctx, Err(Self::rate_limited()));
        }
        let result = self.route(request, &mut ctx);
        self.finish(&mut ctx, result)
    }

    /// Handles a request from the local CLI, which is not rate limited.
    pub fn handle_local(&mut self, request: Request) -> Response {
        let mut ctx = AuditCtx::new(request.endpoint());
        let result = self.route(request, &mut ctx);
        self.finish(&mut ctx, result)
    }

    /// Applies an admin operation as the trusted local operator (CLI).
    pub fn operator(&mut self, op: AdminOp) -> Response {
        let mut ctx = AuditCtx::new(&format!("admin/{}", op.name()));
        ctx.actor = "operator".into();
        let result = self.apply_admin(op);
        self.finish(&mut ctx, result)
    }

    fn rate_limited() -> Failure {
        Failure::new(
            ErrorKind::RateLimited,
            "rate limit exceeded",
            Some("rate-limit"),
        )
    }

    fn finish(&mut self, ctx: &mut AuditCtx, result: Result<Value, Failure>) -> Response {
        let response = match &result {
            Ok(_) if self.dirty => match self.persist() {
                Ok(()) => None,
                Err(e) => Some(Failure::internal(format!("persisting state failed: {e}"))),
            },
            _ => None,
        };
        let result = match response {
            Some(failure) => Err(failure),
            None => result,
        };
        let (outcome, detail) = match &result {
            Ok(v) => (
                Outcome::Allow,
                v.get("audit")
                    .and_then(Value::as_str)
                    .unwrap_or("ok")
                    .to_string(),
            ),
            Err(f) => (
                Outcome::Deny,
                match f.check {
                    Some(check) => format!("{}[{check}]: {}", kind_name(f.kind), f.message),
                    None => format!("{}: {}", kind_name(f.kind), f.message),
                },
            ),
        };
        if let Err(f) = self.audit_append(ctx, outcome, &detail) {
            return Response::failure(f.kind, f.message, f.check);
        }
        match result {
            Ok(mut value) => {
                if let Some(map) = value.as_object_mut() {
                    map.remove("audit");
                }
                Response::success(value)
            }
            Err(f) => Response::failure(f.kind, f.message, f.check),
        }
    }

    fn audit_append(
        &mut self,
        ctx: &AuditCtx,
        outcome: Outcome,
        detail: &str,
    ) -> Result<(), Failure> {
        let now = self.now();
        self.audit
            .append(now, &ctx.actor, &ctx.role, &ctx.endpoint, outcome, detail)
            .map(|_| ())
            .map_err(|e| Failure::internal(format!("audit append failed: {e}")))
    }

    fn persist(&mut self) -> Result<(), StoreError> {
        self.dirty = false;
        self.sessions.purge_expired(self.now());
        let care: BTreeSet<NodeId> = self.records.care_scoped_roles().cloned().collect();
        self.store.save_graph(&self.graph, &care)?;
        self.store.save_keys(&self.keys, &mut self.rng)?;
        self.store.save_capsules(&self.capsules)?;
        self.store.save_pubkeys(&self.pubkeys)?;
        self.store
            .save_sessions(self.sessions.iter(), &mut self.rng)?;
        self.store.save_cohorts(self.records.cohorts())?;
        self.store.save_inbox(&self.inbox)?;
        self.store.sync_records(self.records.sealed())?;
        self.store.sync_chains(self.records.chains())?;
        Ok(())
    }

    fn session(&self, token: &str, ctx: &mut AuditCtx) -> Result<SessionGrant, Failure> {
        let bytes = parse_hex32(token).ok_or_else(|| Failure::auth("malformed session token"))?;
        let grant = self
            .sessions
            .validate(&bytes, self.now())
            .map_err(|e| match e {
                SessionError::Unknown => Failure::auth("unknown session token"),
                SessionError::Expired => Failure::auth("session expired"),
            })?;
        ctx.bind(grant);
        if !self.graph.holds_role(&grant.user, &grant.role) {
            return Err(Failure::auth("session role is no longer held"));
        }
        Ok(grant.clone())
    }

    fn require_admin(&self, grant: &SessionGrant) -> Result<(), Failure> {
        if grant.role.as_str() == self.config.admin_role {
            Ok(())
        } else {
            Err(Failure::unauthorized(
                format!("endpoint requires the {} role", self.config.admin_role),
                "admin-role",
            ))
        }
    }

    fn role_key(
        &self,
        grant: &SessionGrant,
        presented: Option<&PresentedKey>,
    ) -> Result<NodeKey, Failure> {
        match presented {
            Some(p) => {
                let bytes = parse_hex32(&p.key)
                    .ok_or_else(|| Failure::bad_request("role_key.key must be 64 hex digits"))?;
                Ok(NodeKey::new(
                    p.node.clone(),
                    p.version,
                    SecretKey::from_bytes(bytes),
                ))
            }
            None => {
                let client = self
                    .clients
                    .get(&grant.user)
                    .ok_or_else(|| Failure::unauthorized("no key material for user", "key-wrap"))?;
                self.keys
                    .unwrap_role_key(&client.personal, &grant.role)
                    .map_err(dlkm_failure)
            }
        }
    }

    fn signer(&self, user: &UserId) -> Result<ed25519_dalek::SigningKey, Failure> {
        self.clients
            .get(user)
            .map(|c| c.personal.signing_key().clone())
            .ok_or_else(|| Failure::unauthorized("no signing key for user", "signer"))
    }

    fn route(&mut self, request: Request, ctx: &mut AuditCtx) -> Result<Value, Failure> {
        match request {
            Request::Login { user, role, sample } => {
                ctx.actor = user.to_string();
                ctx.role = role.to_string();
                self.login(user, role, sample)
            }
            Request::Logout { token } => {
                self.session(&token, ctx)?;
                let bytes = parse_hex32(&token).expect("validated above");
                self.sessions.remove(&bytes);
                self.dirty = true;
                Ok(json!({ "logged_out": true }))
            }
            Request::Whoami { token } => {
                let grant = self.session(&token, ctx)?;
                let data: Vec<NodeId> = self
                    .graph
                    .accessible_data(&grant.role)?
                    .into_iter()
                    .collect();
                Ok(json!({
                    "user": grant.user,
                    "role": grant.role,
                    "issued_at": grant.issued_at,
                    "expires_at": grant.expires_at,
                    "accessible_data": data,
                }))
            }
            Request::Admin { token, op } => {
                let grant = self.session(&token, ctx)?;
                ctx.endpoint = format!("admin/{}", op.name());
                self.require_admin(&grant)?;
                self.apply_admin(op)
            }
            Request::RecordGet {
                token,
                record_id,
                role_key,
            } => {
                let grant = self.session(&token, ctx)?;
                let key = self.role_key(&grant, role_key.as_ref())?;
                let signer = self.signer(&grant.user)?;
                let req = Requester {
                    session: &grant,
                    role_key: &key,
                    signer: &signer,
                    now: self.now(),
                };
                let env = AccessEnv {
                    graph: &self.graph,
                    keys: &self.keys,
                };
                let record = self
                    .records
                    .get_record(env, req, &record_id)
                    .map_err(record_failure)?;
                self.dirty |= self.config.audit.audit_reads;
                Ok(json!({ "record": record, "audit": format!("read {record_id}") }))
            }
            Request::RecordPut {
                token,
                record,
                role_key,
            } => {
                let grant = self.session(&token, ctx)?;
                if !valid_object_id(&record.record_id) {
                    return Err(Failure::bad_request(
                        "record_id must be 1-128 characters of [A-Za-z0-9._-]",
                    ));
                }
                let key = self.role_key(&grant, role_key.as_ref())?;
                let signer = self.signer(&grant.user)?;
                let now = self.now();
                let req = Requester {
                    session: &grant,
                    role_key: &key,
                    signer: &signer,
                    now,
                };
                let env = AccessEnv {
                    graph: &self.graph,
                    keys: &self.keys,
                };
                let out = self
                    .records
                    .put_record(env, req, &record, &mut self.rng)
                    .map_err(record_failure)?;
                self.dirty = true;
                Ok(json!({
                    "record_id": record.record_id,
                    "created": out.created,
                    "provenance_seq": out.provenance_seq,
                    "key_version": out.key_version,
                    "audit": format!("{} {}", if out.created { "created" } else { "updated" }, record.record_id),
                }))
            }
            Request::Cohort { token, diagnoses } => {
                let grant = self.session(&token, ctx)?;
                let key = self.role_key(&grant, None)?;
                let signer = self.signer(&grant.user)?;
                let req = Requester {
                    session: &grant,
                    role_key: &key,
                    signer: &signer,
                    now: self.now(),
                };
                let env = AccessEnv {
                    graph: &self.graph,
                    keys: &self.keys,
                };
                let cohort = self
                    .records
                    .query_cohort(env, req, &diagnoses)
                    .map_err(record_failure)?;
                self.dirty = true;
                Ok(json!({
                    "cohort_id": cohort.cohort_id,
                    "size": cohort.members.len(),
                    "predicate": cohort.predicate,
                    "audit": format!("cohort {} size {}", cohort.cohort_id, cohort.members.len()),
                }))
            }
            Request::Report {
                token,
                cohort_id,
                dimension,
            } => {
                let grant = self.session(&token, ctx)?;
                let key = self.role_key(&grant, None)?;
                let signer = self.signer(&grant.user)?;
                let req = Requester {
                    session: &grant,
                    role_key: &key,
                    signer: &signer,
                    now: self.now(),
                };
                let env = AccessEnv {
                    graph: &self.graph,
                    keys: &self.keys,
                };
                let report = self
                    .records
                    .aggregate_report(env, req, &cohort_id, dimension)
                    .map_err(record_failure)?;
                let size = self
                    .records
                    .cohort(&cohort_id)
                    .map_or(0, |c| c.members.len());
                Ok(json!({
                    "report": report,
                    "total": report.total(),
                    "cohort_size": size,
                    "audit": format!("report {cohort_id}"),
                }))
            }
            Request::Export { token, cohort_id } => {
                let grant = self.session(&token, ctx)?;
                let key = self.role_key(&grant, None)?;
                let signer = self.signer(&grant.user)?;
                let req = Requester {
                    session: &grant,
                    role_key: &key,
                    signer: &signer,
                    now: self.now(),
                };
                let env = AccessEnv {
                    graph: &self.graph,
                    keys: &self.keys,
                };
                let document = self
                    .records
                    .export_deidentified(env, req, &cohort_id, &self.scanner)
                    .map_err(record_failure)?;
                self.dirty = true;
                let size = self
                    .records
                    .cohort(&cohort_id)
                    .map_or(0, |c| c.members.len());
                Ok(json!({
                    "cohort_id": cohort_id,
                    "patients": size,
                    "document": document,
                    "audit": format!("export {cohort_id} ({size} patients)"),
                }))
            }
            Request::Provenance { token, record_id } => {
                let grant = self.session(&token, ctx)?;
                self.require_admin(&grant)?;
                self.provenance(&record_id)
            }
            Request::TransferSend {
                token,
                record_id,
                receiver,
            } => {
                let grant = self.session(&token, ctx)?;
                self.transfer_send(&grant, &record_id, receiver)
            }
            Request::TransferReceive { token } => {
                let grant = self.session(&token, ctx)?;
                self.transfer_receive(&grant)
            }
            Request::AuditVerify { token } => {
                let grant = self.session(&token, ctx)?;
                self.require_admin(&grant)?;
                let report = self
                    .audit
                    .verify()
                    .map_err(|e| Failure::internal(e.to_string()))?;
                match report.failures.first() {
                    None => Ok(json!({ "report": report })),
                    Some(first) => Err(Failure::integrity(
                        format!(
                            "audit chain broken on {} line {} ({:?}); {} failure(s)",
                            first.day,
                            first.line,
                            first.reason,
                            report.failures.len()
                        ),
                        "audit-chain",
                    )),
                }
            }
        }
    }

    fn login(&mut self, user: UserId, role: NodeId, sample: Vec<f64>) -> Result<Value, Failure> {
        let sample = FeatureVector::normalized(sample).map_err(biocap_failure)?;
        let now = self.now();
        let grant = self
            .capsules
            .authenticate(
                &self.graph,
                &self.config.biocap_config(),
                &user,
                &role,
                &sample,
                now,
                &mut self.rng,
            )
            .map_err(biocap_failure)?;
        let value = json!({
            "token": hex::encode(grant.token),
            "user": grant.user,
            "role": grant.role,
            "expires_at": grant.expires_at,
            "audit": "session issued",
        });
        self.sessions.insert(grant);
        self.dirty = true;
        Ok(value)
    }

    fn provenance(&self, record_id: &str) -> Result<Value, Failure> {
        if !valid_object_id(record_id) {
            return Err(Failure::bad_request("invalid record id"));
        }
        let lines = self
            .store
            .provenance_lines(record_id)?
            .ok_or_else(|| Failure::not_found(format!("no provenance for {record_id}")))?;
        match verify_serialized(&lines, &self.pubkeys) {
            Verdict::Invalid {
                first_bad_seq,
                reason,
            } => Err(Failure::integrity(
                format!("provenance of {record_id} invalid at seq {first_bad_seq}: {reason}"),
                "provenance",
            )),
            Verdict::Valid => {
                let records: Vec<ProvenanceRecord> = lines
                    .iter()
                    .filter_map(|l| ProvenanceRecord::from_canonical(l).ok())
                    .collect();
                let expected = self
                    .records
                    .chain(record_id)
                    .map(|c| (c.len(), c.head_hash()));
                let on_disk = records.last().map(|r| (records.len(), r.hash()));
                if expected.is_some() && expected != on_disk {
                    return Err(Failure::integrity(
                        format!(
                            "provenance of {record_id} on disk does not match the live chain head"
                        ),
                        "provenance-head",
                    ));
                }
                let listing: Vec<Value> = records
                    .iter()
                    .map(|r| {
                        json!({
                            "seq": r.seq,
                            "actor": r.actor,
                            "role": r.role,
                            "op_kind": r.op_kind.as_str(),
                            "timestamp": r.timestamp,
                            "state_hash": hex::encode(r.state_hash),
                        })
                    })
                    .collect();
                Ok(json!({
                    "record_id": record_id,
                    "verdict": Verdict::Valid,
                    "records": listing,
                    "audit": format!("provenance {record_id}"),
                }))
            }
        }
    }

    fn channel_key(&self, sender: &UserId, receiver: &UserId) -> [u8; 32] {
        self.store.master().subkey(
            "transfer-channel",
            &[sender.as_bytes(), receiver.as_bytes()],
        )
    }

    fn transfer_send(
        &mut self,
        grant: &SessionGrant,
        record_id: &str,
        receiver: UserId,
    ) -> Result<Value, Failure> {
        let data_node = self
            .records
            .sealed_record(record_id)
            .map(|r| r.data_node.clone())
            .ok_or_else(|| Failure::not_found(format!("unknown record {record_id}")))?;
        if !self
            .graph
            .can_access(&receiver, &data_node)
            .unwrap_or(false)
        {
            return Err(Failure::unauthorized(
                format!("receiver {receiver} may not hold data at {data_node}"),
                "receiver",
            ));
        }
        let key = self.role_key(grant, None)?;
        let signer = self.signer(&grant.user)?;
        let req = Requester {
            session: grant,
            role_key: &key,
            signer: &signer,
            now: self.now(),
        };
        let env = AccessEnv {
            graph: &self.graph,
            keys: &self.keys,
        };
        let (head, record) = self
            .records
            .note_transfer(env, req, record_id)
            .map_err(record_failure)?;
        let payload = serde_json::to_vec(&record).map_err(|e| Failure::internal(e.to_string()))?;
        let channel = self.channel_key(&grant.user, &receiver);
        let envelope = seal_transfer(
            &payload,
            &channel,
            grant.user.clone(),
            receiver.clone(),
            head,
            &mut self.rng,
        );
        let id = self.rng.next_u64() >> 11;
        self.inbox.push(InboxItem {
            id,
            record_id: record_id.to_string(),
            sent_at: self.now(),
            envelope: EnvelopeJson::from(&envelope),
        });
        self.dirty = true;
        Ok(json!({
            "transfer_id": id,
            "receiver": receiver,
            "chain_head_hash": hex::encode(head),
            "audit": format!("sent {record_id} to {receiver}"),
        }))
    }

    /// Delivers the oldest envelope addressed to the caller. An envelope that
    /// fails any check is dropped and reported as an integrity failure.
    fn transfer_receive(&mut self, grant: &SessionGrant) -> Result<Value, Failure> {
        let pos = self
            .inbox
            .iter()
            .position(|i| i.envelope.receiver == grant.user)
            .ok_or_else(|| Failure::not_found("no pending transfers"))?;
        let item = self.inbox.remove(pos);
        self.dirty = true;
        let envelope = TransferEnvelope::from(item.envelope.clone());
        let channel = self.channel_key(&envelope.sender, &grant.user);
        if !self.config.faults.skip_transfer_mac {
            envelope.verify_mac(&channel).map_err(|_| {
                Failure::integrity(format!("transfer {} failed its MAC check", item.id), "mac")
            })?;
        }
        let payload = envelope.decrypt(&channel).map_err(|e| match e {
            TransferError::MacFailure => Failure::integrity("transfer MAC failure", "mac"),
            TransferError::DecryptFailure => {
                Failure::integrity(format!("transfer {} failed to decrypt", item.id), "decrypt")
            }
        })?;
        let record: ClinicalRecord = serde_json::from_slice(&payload)
            .map_err(|_| Failure::integrity("transfer payload is not a record", "payload"))?;
        if record.record_id != item.record_id {
            return Err(Failure::integrity(
                "transfer payload names another record",
                "payload",
            ));
        }
        let on_chain = self.records.chain(&record.record_id).is_some_and(|c| {
            c.records()
                .iter()
                .any(|r| r.hash() == envelope.chain_head_hash)
        });
        if !on_chain {
            return Err(Failure::integrity(
                "transfer does not match the record's provenance chain",
                "provenance-link",
            ));
        }
        if !self
            .graph
            .can_access(&grant.user, &record.data_node)
            .unwrap_or(false)
        {
            return Err(Failure::unauthorized(
                "receiver no longer has access to this data",
                "receiver",
            ));
        }
        Ok(json!({
            "transfer_id": item.id,
            "sender": envelope.sender,
            "record": record,
            "audit": format!("received {} from {}", item.record_id, envelope.sender),
        }))
    }

    fn rotate(&mut self, node: &NodeId, reason: RotationReason) -> Result<RekeyReport, Failure> {
        let lookup = ClientLookup(&self.clients);
        self.keys
            .rotate_on_change(&self.graph, node, reason, &lookup, &mut self.rng)
            .map_err(dlkm_failure)
    }

    /// Hierarchy and membership changes with the key and capsule upkeep they imply.
    fn apply_admin(&mut self, op: AdminOp) -> Result<Value, Failure> {
        let now = self.now();
        let value = match op {
            AdminOp::AddRole { id } => {
                self.graph.add_node(NodeKind::Role, id.clone())?;
                let version = self
                    .keys
                    .generate_node_key(&self.graph, &id, &mut self.rng)
                    .map_err(dlkm_failure)?
                    .version();
                let rs = self
                    .capsules
                    .reissue_rs(&self.graph, &id, self.config.biocap.dim, now, &mut self.rng)
                    .map_err(biocap_failure)?
                    .rs_id
                    .clone();
                json!({ "role": id, "key_version": version, "rs_id": rs, "audit": format!("add role {id}") })
            }
            AdminOp::AddData { id } => {
                self.graph.add_node(NodeKind::Data, id.clone())?;
                let version = self
                    .keys
                    .generate_node_key(&self.graph, &id, &mut self.rng)
                    .map_err(dlkm_failure)?
                    .version();
                json!({ "data": id, "key_version": version, "audit": format!("add data {id}") })
            }
            AdminOp::AddEdge {
                kind,
                parent,
                child,
            } => {
                self.graph.add_edge(kind, parent.clone(), child.clone())?;
                self.keys
                    .publish(&self.graph, &parent, &child, &mut self.rng)
                    .map_err(dlkm_failure)?;
                json!({ "edge": [parent, child], "audit": format!("add {kind:?} edge {parent}->{child}") })
            }
            AdminOp::RemoveEdge {
                kind,
                parent,
                child,
            } => {
                self.graph.remove_edge(kind, &parent, &child)?;
                let report = self.rotate(&child, RotationReason::EdgeRemoved)?;
                json!({ "rekey": report, "audit": format!("remove {kind:?} edge {parent}->{child}; rotated {}", report.rotated.len()) })
            }
            AdminOp::RemoveNode { id } => {
                if self.records.sealed().any(|r| r.data_node == id) {
                    return Err(Failure::bad_request(format!(
                        "data node {id} still holds records"
                    )));
                }
                let is_role = self.graph.kind_of(&id) == Some(NodeKind::Role);
                let successors = self.graph.remove_node(&id)?;
                self.keys.forget_node(&id);
                if is_role {
                    self.capsules.forget_role(&id);
                    self.records.set_care_scoped(id.clone(), false);
                }
                let mut reports = Vec::new();
                for node in successors {
                    reports.push(self.rotate(&node, RotationReason::NodeRemoved)?);
                }
                json!({ "removed": id, "rekey": reports, "audit": format!("remove node {id}") })
            }
            AdminOp::Associate { role, data } => {
                self.graph.associate(role.clone(), data.clone())?;
                self.keys
                    .publish(&self.graph, &role, &data, &mut self.rng)
                    .map_err(dlkm_failure)?;
                json!({ "association": [role, data], "audit": format!("associate {role}->{data}") })
            }
            AdminOp::Dissociate { role, data } => {
                self.graph.dissociate(&role, &data)?;
                let report = self.rotate(&data, RotationReason::EdgeRemoved)?;
                json!({ "rekey": report, "audit": format!("dissociate {role}->{data}") })
            }
            AdminOp::AddUser {
                user,
                biometric_seed,
            } => {
                self.graph.add_user(user.clone())?;
                let personal = PersonalSecret::generate(user.clone(), &mut self.rng);
                let seed = biometric_seed.unwrap_or_else(|| self.rng.next_u64());
                self.pubkeys.insert(user.clone(), personal.verifying_key());
                let secrets = ClientSecrets {
                    personal,
                    biometric_seed: seed,
                };
                self.store.save_client(&secrets, &mut self.rng)?;
                self.clients.insert(user.clone(), secrets);
                json!({ "user": user, "audit": format!("add user {user}") })
            }
            AdminOp::Assign { user, role } => {
                self.graph.assign(&user, role.clone())?;
                let client = self
                    .clients
                    .get(&user)
                    .ok_or_else(|| Failure::internal(format!("no key material for {user}")))?;
                let version = self
                    .keys
                    .issue_wrap(&self.graph, &client.personal, &role, &mut self.rng)
                    .map_err(dlkm_failure)?
                    .role_version;
                json!({ "user": user, "role": role, "wrap_version": version, "audit": format!("assign {user} to {role}") })
            }
            AdminOp::Revoke { user, role } => {
                self.graph.revoke(&user, &role)?;
                let ended = self.sessions.end_role_sessions(&user, &role);
                self.capsules.remove_capsule(&user, &role);
                let report = self.rotate(&role, RotationReason::UserRevoked)?;
                json!({
                    "user": user,
                    "role": role,
                    "sessions_ended": ended,
                    "rekey": report,
                    "audit": format!("revoke {user} from {role}; rotated {}", report.rotated.len()),
                })
            }
            AdminOp::Enroll {
                user,
                role,
                samples,
            } => {
                let samples = samples
                    .into_iter()
                    .map(FeatureVector::normalized)
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(biocap_failure)?;
                let rs = self
                    .capsules
                    .enroll(&self.graph, &user, &role, &samples)
                    .map_err(biocap_failure)?
                    .rs_id
                    .clone();
                json!({ "user": user, "role": role, "rs_id": rs, "audit": format!("enroll {user} for {role}") })
            }
            AdminOp::ReissueRs { role } => {
                let rs = self
                    .capsules
                    .reissue_rs(
                        &self.graph,
                        &role,
                        self.config.biocap.dim,
                        now,
                        &mut self.rng,
                    )
                    .map_err(biocap_failure)?
                    .rs_id
                    .clone();
                json!({ "role": role, "rs_id": rs, "audit": format!("reissue RS for {role}") })
            }
            AdminOp::SetCareScoped { role, scoped } => {
                if self.graph.kind_of(&role) != Some(NodeKind::Role) {
                    return Err(Failure::not_found(format!("unknown role {role}")));
                }
                self.records.set_care_scoped(role.clone(), scoped);
                json!({ "role": role, "care_scoped": scoped, "audit": format!("care scope {role}={scoped}") })
            }
        };
        self.dirty = true;
        Ok(value)
    }
}

fn kind_name(kind: ErrorKind) -> &'static str {
    match kind {
        ErrorKind::AuthRequired => "auth_required",
        ErrorKind::Unauthorized => "unauthorized",
        ErrorKind::RateLimited => "rate_limited",
        ErrorKind::Integrity => "integrity",
        ErrorKind::BadRequest => "bad_request",
        ErrorKind::NotFound => "not_found",
        ErrorKind::Internal => "internal",
    }
}
