//! Scenario suites: ordered, annotated steps run through the public
//! endpoints against a seeded fixture, with a pass/fail report.
//!
//! Suite files are TOML:
//!
//! ```toml
//! name = "example"
//! [fixture]
//! seed = 7
//! patients = 24
//!
//! [[steps]]
//! id = "login"
//! kind = "login"
//! actor = "dr_adams"
//! expected = "allow"
//! cvss = "CVSS:3.0/AV:N/AC:L/PR:N/UI:N/S:U/C:H/I:H/A:N"
//! [steps.inputs]
//! action = "login"
//! role = "Physician"
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use dynaswap_core::cvss::{self, CvssVector, Severity};
use dynaswap_core::recordstore::{ClinicalRecord, IdentifierScanner, ReportDimension};
use dynaswap_core::{NodeId, UserId};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::api::{AdminOp, ErrorKind, PresentedKey, Request, Response};
use crate::audit::day_of;
use crate::codec::{decode_b64, encode_b64};
use crate::config::{Config, MasterKey};
use crate::fixture::{self, FixtureSummary};
use crate::gateway::{Clock, Gateway};
use crate::scanner::RegexScanner;

/// Manual-clock start of every scenario run: 2026-01-01T00:00:00Z.
pub const SCENARIO_EPOCH: u64 = 1_767_225_600;

/// Client id of ordinary scenario traffic.
pub const CLINIC: &str = "clinic";
/// Client id of the junk flood in availability probes.
pub const BOTNET: &str = "botnet";

#[derive(Debug, thiserror::Error)]
pub enum ScenarioConfigError {
    #[error("cannot read suite {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("suite does not parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid suite: {0}")]
    Invalid(String),
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ScenarioConfigError),
    #[error("gateway: {0}")]
    Gateway(#[from] crate::gateway::GatewayError),
    #[error("fixture: {0}")]
    Fixture(#[from] fixture::FixtureError),
    #[error("audit: {0}")]
    Audit(#[from] crate::audit::AuditError),
}

/// The workflow steps under evaluation, one per evaluation-table row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Login,
    AccessControl,
    AccessData,
    CreateCompute,
    Update,
    Upload,
    NetworkTransfer,
}

impl StepKind {
    pub const ALL: [StepKind; 7] = [
        StepKind::Login,
        StepKind::AccessControl,
        StepKind::AccessData,
        StepKind::CreateCompute,
        StepKind::Update,
        StepKind::Upload,
        StepKind::NetworkTransfer,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Expected {
    Allow,
    Deny,
    DetectTamper,
}

impl fmt::Display for Expected {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Expected::Allow => "allow",
            Expected::Deny => "deny",
            Expected::DetectTamper => "detect-tamper",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvelopePart {
    Payload,
    Mac,
    Header,
}

/// What a step does. Every variant goes through the gateway's endpoints;
/// the tamper variants first edit persisted or in-flight bytes the way an
/// attacker with file or network access would.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    Login {
        role: NodeId,
        /// Present a capture of this user instead of the actor's own.
        #[serde(default)]
        sample_of: Option<UserId>,
        /// Keep the client-side role key for a later `role_key = "saved"`.
        #[serde(default)]
        save_key: bool,
    },
    Logout,
    Whoami,
    /// An admin operation; `enroll` without samples gets fresh captures.
    Admin {
        op: AdminOp,
    },
    Get {
        record_id: String,
        #[serde(default)]
        role_key: Option<String>,
    },
    /// Either a whole new `record`, or read-modify-write of `record_id` with `set`.
    Put {
        #[serde(default)]
        record: Option<ClinicalRecord>,
        #[serde(default)]
        record_id: Option<String>,
        #[serde(default)]
        set: BTreeMap<String, String>,
        #[serde(default)]
        role_key: Option<String>,
    },
    Cohort {
        diagnoses: BTreeSet<String>,
        save_as: String,
    },
    Report {
        cohort: String,
        dimension: ReportDimension,
    },
    Export {
        cohort: String,
    },
    /// A raw request body; `{token}` is replaced by the actor's token.
    Raw {
        body: String,
    },
    /// Rewrites the actor of the newest audit entry for `endpoint`, asks
    /// for verification, then puts the original line back.
    TamperAudit {
        endpoint: String,
        set_actor: String,
    },
    /// Flips one bit of a persisted provenance record, queries it, then
    /// restores the file.
    TamperProvenance {
        record_id: String,
        #[serde(default)]
        seq: usize,
    },
    Provenance {
        record_id: String,
        #[serde(default)]
        expect_actor: Option<String>,
    },
    AuditVerify,
    Send {
        record_id: String,
        receiver: UserId,
    },
    Receive {
        #[serde(default)]
        tamper: Option<EnvelopePart>,
    },
    /// `junk` malformed requests from another client, with one legitimate
    /// read of `record_id` by the actor every `every` junk requests.
    Burst {
        record_id: String,
        #[serde(default = "default_junk")]
        junk: usize,
        #[serde(default = "default_every")]
        every: usize,
    },
}

fn default_junk() -> usize {
    1000
}

fn default_every() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub id: String,
    pub kind: StepKind,
    pub actor: String,
    pub expected: Expected,
    #[serde(default)]
    pub expect_error: Option<ErrorKind>,
    #[serde(default)]
    pub check: Option<String>,
    pub cvss: CvssVector,
    #[serde(default)]
    pub description: Option<String>,
    /// Seconds to move the clock forward before the step.
    #[serde(default)]
    pub advance_secs: u64,
    pub inputs: Action,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureSpec {
    pub seed: u64,
    pub patients: usize,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Suite {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub fixture: FixtureSpec,
    #[serde(default)]
    pub steps: Vec<Step>,
}

impl Suite {
    pub fn load(path: &Path) -> Result<Self, ScenarioConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ScenarioConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ScenarioConfigError> {
        let suite: Suite = toml::from_str(text)?;
        suite.validate()?;
        Ok(suite)
    }

    pub fn validate(&self) -> Result<(), ScenarioConfigError> {
        let invalid = |msg: String| Err(ScenarioConfigError::Invalid(msg));
        let mut ids = BTreeSet::new();
        let mut cohorts = BTreeSet::new();
        for step in &self.steps {
            if step.id.is_empty() || !ids.insert(step.id.as_str()) {
                return invalid(format!("step id {:?} is empty or repeated", step.id));
            }
            if step.expected == Expected::Allow
                && (step.expect_error.is_some() || step.check.is_some())
            {
                return invalid(format!(
                    "step {}: an allow step cannot name an error",
                    step.id
                ));
            }
            match &step.inputs {
                Action::Cohort { save_as, .. } => {
                    cohorts.insert(save_as.as_str());
                }
                Action::Report { cohort, .. } | Action::Export { cohort }
                    if !cohorts.contains(cohort.as_str()) =>
                {
                    return invalid(format!(
                        "step {}: cohort {cohort:?} is not saved by an earlier step",
                        step.id
                    ));
                }
                Action::Get {
                    role_key: Some(k), ..
                }
                | Action::Put {
                    role_key: Some(k), ..
                } if k != "saved" => {
                    return invalid(format!("step {}: role_key must be \"saved\"", step.id));
                }
                Action::Put {
                    record, record_id, ..
                } if record.is_some() == record_id.is_some() => {
                    return invalid(format!(
                        "step {}: put needs exactly one of record or record_id",
                        step.id
                    ));
                }
                Action::Burst { junk, every, .. } if *junk == 0 || *every == 0 => {
                    return invalid(format!(
                        "step {}: burst needs junk > 0 and every > 0",
                        step.id
                    ));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Observed {
    Allow,
    Deny,
    DetectTamper,
}

impl Observed {
    fn of(response: &Response) -> Self {
        match response.kind() {
            None => Observed::Allow,
            Some(ErrorKind::Integrity) => Observed::DetectTamper,
            Some(_) => Observed::Deny,
        }
    }

    fn matches(self, expected: Expected) -> bool {
        matches!(
            (self, expected),
            (Observed::Allow, Expected::Allow)
                | (Observed::Deny, Expected::Deny)
                | (Observed::DetectTamper, Expected::DetectTamper)
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepResult {
    pub id: String,
    pub kind: StepKind,
    pub actor: String,
    pub expected: Expected,
    pub observed: Observed,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_kind: Option<ErrorKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub check: Option<String>,
    /// Outcome summary; never record content.
    pub detail: String,
    pub cvss_vector: String,
    pub cvss_base: f64,
    pub severity: Severity,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Totals {
    pub steps: usize,
    pub passed: usize,
    pub failed: usize,
    pub allow: usize,
    pub deny: usize,
    pub detect_tamper: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub suite: String,
    pub steps: Vec<StepResult>,
    pub totals: Totals,
    pub by_kind: BTreeMap<StepKind, usize>,
    pub audit_entries: u64,
    pub audit_intact: bool,
}

impl ScenarioReport {
    pub fn all_passed(&self) -> bool {
        self.totals.failed == 0 && self.audit_intact
    }

    pub fn summary_line(&self) -> String {
        let t = &self.totals;
        format!(
            "suite {}: {}/{} steps passed (allow {}, deny {}, detect-tamper {}); audit chain {} ({} entries)",
            self.suite,
            t.passed,
            t.steps,
            t.allow,
            t.deny,
            t.detect_tamper,
            if self.audit_intact { "intact" } else { "BROKEN" },
            self.audit_entries
        )
    }
}

/// Result of a run in a fresh store.
pub struct RunOutcome {
    pub report: ScenarioReport,
    pub fixture: FixtureSummary,
}

/// Seeds the (empty) store named by `config` with the suite's fixture and
/// runs the suite on a manual clock.
pub fn run_fresh(
    suite: &Suite,
    mut config: Config,
    master: MasterKey,
) -> Result<RunOutcome, ScenarioError> {
    config.rng_seed.get_or_insert(suite.fixture.seed);
    let mut gw = Gateway::open(config, master, Clock::Manual(SCENARIO_EPOCH))?;
    let summary = fixture::seed(&mut gw, suite.fixture.seed, suite.fixture.patients)?;
    let report = run_suite(&mut gw, suite, &summary.markers)?;
    Ok(RunOutcome {
        report,
        fixture: summary,
    })
}

/// Runs every step in order. `markers` are plaintext values that must not
/// show up in any export.
pub fn run_suite(
    gw: &mut Gateway,
    suite: &Suite,
    markers: &[String],
) -> Result<ScenarioReport, ScenarioError> {
    suite.validate()?;
    let mut runner = Runner {
        gw,
        markers,
        tokens: BTreeMap::new(),
        saved_keys: BTreeMap::new(),
        cohorts: BTreeMap::new(),
        scanner: RegexScanner::new(),
    };
    let mut steps = Vec::with_capacity(suite.steps.len());
    let mut totals = Totals::default();
    let mut by_kind = BTreeMap::new();
    for step in &suite.steps {
        let result = runner.run_step(step);
        totals.steps += 1;
        if result.passed {
            totals.passed += 1;
        } else {
            totals.failed += 1;
        }
        match result.observed {
            Observed::Allow => totals.allow += 1,
            Observed::Deny => totals.deny += 1,
            Observed::DetectTamper => totals.detect_tamper += 1,
        }
        *by_kind.entry(step.kind).or_insert(0) += 1;
        steps.push(result);
    }
    let audit = runner.gw.audit_report()?;
    Ok(ScenarioReport {
        suite: suite.name.clone(),
        steps,
        totals,
        by_kind,
        audit_entries: audit.entries,
        audit_intact: audit.is_intact(),
    })
}

struct Runner<'a> {
    gw: &'a mut Gateway,
    markers: &'a [String],
    tokens: BTreeMap<String, String>,
    saved_keys: BTreeMap<String, PresentedKey>,
    cohorts: BTreeMap<String, (String, usize)>,
    scanner: RegexScanner,
}

/// Response of the step's final request plus the runner's own checks.
struct StepRun {
    response: Response,
    detail: String,
    self_check: Result<(), String>,
}

impl StepRun {
    fn plain(response: Response) -> Self {
        Self {
            response,
            detail: String::new(),
            self_check: Ok(()),
        }
    }
}

impl Runner<'_> {
    fn run_step(&mut self, step: &Step) -> StepResult {
        self.gw.advance(1 + step.advance_secs);
        let run = match self.execute(step) {
            Ok(run) => run,
            Err(message) => StepRun {
                response: Response::failure(ErrorKind::Internal, message.clone(), None),
                detail: String::new(),
                self_check: Err(message),
            },
        };
        let observed = Observed::of(&run.response);
        let error_kind = run.response.kind();
        let check = run.response.check().map(str::to_string);
        let mut passed = observed.matches(step.expected) && run.self_check.is_ok();
        if let Some(kind) = step.expect_error {
            passed &= error_kind == Some(kind);
        }
        if let Some(expected) = &step.check {
            passed &= check.as_deref() == Some(expected.as_str());
        }
        let mut detail = match (&run.response.error, run.detail.is_empty()) {
            (Some(error), _) => error.message.clone(),
            (None, false) => run.detail,
            (None, true) => "ok".to_string(),
        };
        if let Err(problem) = run.self_check {
            detail = format!("{detail}; self-check failed: {problem}");
        }
        let score = cvss::score(&step.cvss);
        StepResult {
            id: step.id.clone(),
            kind: step.kind,
            actor: step.actor.clone(),
            expected: step.expected,
            observed,
            passed,
            error_kind,
            check,
            detail,
            cvss_vector: step.cvss.to_string(),
            cvss_base: score.base,
            severity: score.severity,
        }
    }

    fn token(&self, actor: &str) -> String {
        self.tokens.get(actor).cloned().unwrap_or_default()
    }

    fn saved_key(
        &self,
        actor: &str,
        choice: &Option<String>,
    ) -> Result<Option<PresentedKey>, String> {
        match choice {
            None => Ok(None),
            Some(_) => self
                .saved_keys
                .get(actor)
                .cloned()
                .map(Some)
                .ok_or_else(|| format!("no saved role key for {actor}")),
        }
    }

    fn send(&mut self, request: Request) -> Response {
        self.gw.handle(CLINIC, request)
    }

    fn execute(&mut self, step: &Step) -> Result<StepRun, String> {
        let actor = step.actor.as_str();
        let token = self.token(actor);
        let run = match &step.inputs {
            Action::Login {
                role,
                sample_of,
                save_key,
            } => {
                let source = sample_of.clone().unwrap_or_else(|| UserId::new(actor));
                let sample = self
                    .gw
                    .capture_sample(&source)
                    .unwrap_or_else(|| vec![1.0; self.gw.config().biocap.dim]);
                let response = self.send(Request::Login {
                    user: UserId::new(actor),
                    role: role.clone(),
                    sample,
                });
                if let Some(token) = response.data.as_ref().and_then(|d| d["token"].as_str()) {
                    self.tokens.insert(actor.to_string(), token.to_string());
                    if *save_key {
                        let key = self
                            .gw
                            .client_role_key(&UserId::new(actor), role)
                            .ok_or_else(|| format!("{actor} holds no wrap for {role}"))?;
                        self.saved_keys.insert(actor.to_string(), key);
                    }
                }
                StepRun::plain(response)
            }
            Action::Logout => {
                let response = self.send(Request::Logout { token });
                if response.ok {
                    self.tokens.remove(actor);
                }
                StepRun::plain(response)
            }
            Action::Whoami => StepRun::plain(self.send(Request::Whoami { token })),
            Action::Admin { op } => {
                let mut op = op.clone();
                if let AdminOp::Enroll { user, samples, .. } = &mut op {
                    if samples.is_empty() {
                        *samples = self.gw.enrollment_samples(user, 5).unwrap_or_default();
                    }
                }
                StepRun::plain(self.send(Request::Admin { token, op }))
            }
            Action::Get {
                record_id,
                role_key,
            } => {
                let role_key = self.saved_key(actor, role_key)?;
                StepRun::plain(self.send(Request::RecordGet {
                    token,
                    record_id: record_id.clone(),
                    role_key,
                }))
            }
            Action::Put {
                record,
                record_id,
                set,
                role_key,
            } => {
                let role_key = self.saved_key(actor, role_key)?;
                let record = match (record, record_id) {
                    (Some(record), _) => record.clone(),
                    (None, Some(id)) => {
                        let current = self.send(Request::RecordGet {
                            token: token.clone(),
                            record_id: id.clone(),
                            role_key: role_key.clone(),
                        });
                        if !current.ok {
                            return Ok(StepRun::plain(current));
                        }
                        let data = current.data.unwrap_or_default();
                        let mut record: ClinicalRecord =
                            serde_json::from_value(data["record"].clone())
                                .map_err(|e| e.to_string())?;
                        record.fields.extend(set.clone());
                        record
                    }
                    (None, None) => return Err("put without record".into()),
                };
                StepRun::plain(self.send(Request::RecordPut {
                    token,
                    record,
                    role_key,
                }))
            }
            Action::Cohort { diagnoses, save_as } => {
                let response = self.send(Request::Cohort {
                    token,
                    diagnoses: diagnoses.clone(),
                });
                let mut run = StepRun::plain(response);
                if let Some(data) = &run.response.data {
                    let id = data["cohort_id"].as_str().unwrap_or_default().to_string();
                    let size = data["size"].as_u64().unwrap_or(0) as usize;
                    run.detail = format!("{id}: {size} records");
                    self.cohorts.insert(save_as.clone(), (id, size));
                }
                run
            }
            Action::Report { cohort, dimension } => {
                let (cohort_id, size) =
                    self.cohorts.get(cohort).cloned().ok_or("unknown cohort")?;
                let response = self.send(Request::Report {
                    token,
                    cohort_id,
                    dimension: *dimension,
                });
                let mut run = StepRun::plain(response);
                if let Some(data) = &run.response.data {
                    let total = data["total"].as_u64().unwrap_or(u64::MAX) as usize;
                    let rows = data["report"]["rows"].as_array().map_or(0, Vec::len);
                    run.detail = format!("{rows} rows covering {total} records");
                    if total != size {
                        run.self_check =
                            Err(format!("report covers {total} records, cohort has {size}"));
                    }
                }
                run
            }
            Action::Export { cohort } => {
                let (cohort_id, size) =
                    self.cohorts.get(cohort).cloned().ok_or("unknown cohort")?;
                let response = self.send(Request::Export { token, cohort_id });
                let mut run = StepRun::plain(response);
                if let Some(data) = &run.response.data {
                    let document = data["document"].as_str().unwrap_or_default();
                    let findings = self.scanner.scan(document);
                    let leaked = self
                        .markers
                        .iter()
                        .filter(|m| document.contains(m.as_str()))
                        .count();
                    let patients = document.matches("<patient ").count();
                    run.detail = format!(
                        "{patients} patients exported, {} scanner findings",
                        findings.len()
                    );
                    run.self_check = if size == 0 {
                        Err("cohort is empty, nothing to check".into())
                    } else if patients != size {
                        Err(format!(
                            "export holds {patients} patients, cohort has {size}"
                        ))
                    } else if !findings.is_empty() {
                        Err(format!("{} scanner findings", findings.len()))
                    } else if leaked > 0 {
                        Err(format!("{leaked} fixture markers in export"))
                    } else {
                        Ok(())
                    };
                }
                run
            }
            Action::Raw { body } => StepRun::plain(
                self.gw
                    .handle_json(CLINIC, &body.replace("{token}", &token)),
            ),
            Action::TamperAudit {
                endpoint,
                set_actor,
            } => self.tamper_audit(token, endpoint, set_actor)?,
            Action::TamperProvenance { record_id, seq } => {
                self.tamper_provenance(token, record_id, *seq)?
            }
            Action::Provenance {
                record_id,
                expect_actor,
            } => {
                let response = self.send(Request::Provenance {
                    token,
                    record_id: record_id.clone(),
                });
                let mut run = StepRun::plain(response);
                if let Some(data) = &run.response.data {
                    let records = data["records"].as_array().cloned().unwrap_or_default();
                    let last = records
                        .last()
                        .and_then(|r| r["actor"].as_str())
                        .unwrap_or_default()
                        .to_string();
                    run.detail = format!("{} records, last by {last}", records.len());
                    if let Some(expected) = expect_actor {
                        if &last != expected {
                            run.self_check =
                                Err(format!("last change by {last}, expected {expected}"));
                        }
                    }
                }
                run
            }
            Action::AuditVerify => StepRun::plain(self.send(Request::AuditVerify { token })),
            Action::Send {
                record_id,
                receiver,
            } => StepRun::plain(self.send(Request::TransferSend {
                token,
                record_id: record_id.clone(),
                receiver: receiver.clone(),
            })),
            Action::Receive { tamper } => {
                if let Some(part) = tamper {
                    let item = self
                        .gw
                        .in_flight_mut()
                        .iter_mut()
                        .find(|i| i.envelope.receiver.as_str() == actor)
                        .ok_or("nothing in flight to tamper with")?;
                    match part {
                        EnvelopePart::Payload => {
                            let mid = item.envelope.payload.len() / 2;
                            item.envelope.payload[mid] ^= 0x01;
                        }
                        EnvelopePart::Mac => item.envelope.mac[0] ^= 0x01,
                        EnvelopePart::Header => item.envelope.chain_head_hash[0] ^= 0x01,
                    }
                }
                let mut run = StepRun::plain(self.send(Request::TransferReceive { token }));
                if let Some(data) = &run.response.data {
                    run.detail = format!("received transfer {}", data["transfer_id"]);
                }
                run
            }
            Action::Burst {
                record_id,
                junk,
                every,
            } => self.burst(token, record_id, *junk, *every),
        };
        Ok(run)
    }

    fn tamper_audit(
        &mut self,
        token: String,
        endpoint: &str,
        set_actor: &str,
    ) -> Result<StepRun, String> {
        let path = self.gw.audit_log().day_path(&day_of(self.gw.now()));
        let text = fs::read_to_string(&path).map_err(|e| e.to_string())?;
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        let index = lines
            .iter()
            .rposition(|l| {
                serde_json::from_str::<Value>(l)
                    .is_ok_and(|v| v["endpoint"] == json!(endpoint) && v["outcome"] == "allow")
            })
            .ok_or_else(|| format!("no allowed {endpoint} entry to rewrite"))?;
        let original = lines[index].clone();
        let mut entry: Value = serde_json::from_str(&original).map_err(|e| e.to_string())?;
        let true_actor = entry["actor"].as_str().unwrap_or_default().to_string();
        entry["actor"] = json!(set_actor);
        lines[index] = entry.to_string();
        fs::write(&path, lines.join("\n") + "\n").map_err(|e| e.to_string())?;

        let response = self.send(Request::AuditVerify { token });

        // Put the original line back; entries appended meanwhile stay.
        let text = fs::read_to_string(&path).map_err(|e| e.to_string())?;
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        lines[index] = original;
        fs::write(&path, lines.join("\n") + "\n").map_err(|e| e.to_string())?;

        let mut run = StepRun::plain(response);
        run.detail = format!(
            "rewrote audit line {} ({true_actor} -> {set_actor})",
            index + 1
        );
        Ok(run)
    }

    fn tamper_provenance(
        &mut self,
        token: String,
        record_id: &str,
        seq: usize,
    ) -> Result<StepRun, String> {
        let path = self.gw.store().provenance_path(record_id);
        let original = fs::read_to_string(&path).map_err(|e| e.to_string())?;
        let mut lines: Vec<String> = original.lines().map(str::to_string).collect();
        let line = lines
            .get_mut(seq)
            .ok_or_else(|| format!("{record_id} has no record {seq}"))?;
        let mut bytes = decode_b64(line).ok_or("provenance line is not base64")?;
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        *line = encode_b64(&bytes);
        fs::write(&path, lines.join("\n") + "\n").map_err(|e| e.to_string())?;
        let response = self.send(Request::Provenance {
            token,
            record_id: record_id.to_string(),
        });
        fs::write(&path, original).map_err(|e| e.to_string())?;
        let mut run = StepRun::plain(response);
        run.detail = format!("flipped one bit of record {seq}");
        Ok(run)
    }

    fn burst(&mut self, token: String, record_id: &str, junk: usize, every: usize) -> StepRun {
        let mut limited = 0;
        let mut legit = 0;
        let mut legit_ok = 0;
        let mut last_failure = None;
        for i in 0..junk {
            if i % every == 0 {
                legit += 1;
                let response = self.send(Request::RecordGet {
                    token: token.clone(),
                    record_id: record_id.to_string(),
                    role_key: None,
                });
                if response.ok {
                    legit_ok += 1;
                } else {
                    last_failure = Some(response);
                }
            }
            let body = format!("{{\"endpoint\":\"whoami\",\"token\":\"junk-{i}\"}}");
            if self.gw.handle_json(BOTNET, &body).kind() == Some(ErrorKind::RateLimited) {
                limited += 1;
            }
        }
        let detail = format!("{legit_ok}/{legit} legitimate reads served; {limited}/{junk} junk requests rate-limited");
        let response = match last_failure {
            Some(failure) => failure,
            None => Response::success(json!({ "served": legit_ok })),
        };
        StepRun {
            response,
            detail,
            self_check: if limited == 0 {
                Err("the flood was never rate limited".into())
            } else {
                Ok(())
            },
        }
    }
}
