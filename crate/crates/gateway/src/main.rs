use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dynaswap_core::cvss;
use dynaswap_core::hierarchy::NodeKind;
use dynaswap_core::provenance::{verify_serialized, Verdict};
use dynaswap_core::recordstore::{ClinicalRecord, ReportDimension};
use dynaswap_core::{NodeId, UserId};
use dynaswap_gateway::codec::decode_b64;
use dynaswap_gateway::config::MASTER_KEY_ENV;
use dynaswap_gateway::scenario::{self, Suite};
use dynaswap_gateway::server::Server;
use dynaswap_gateway::{fixture, AdminOp, Clock, Config, Gateway, MasterKey, Request, Response};
use rand_core::{OsRng, RngCore};
use serde_json::{json, Value};

/// Like `println!`, but a closed stdout (for example `| head`) is not an error.
macro_rules! out {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(
    name = "dynaswap",
    version,
    about = "Secure clinical data-sharing gateway"
)]
struct Cli {
    /// Gateway config file (TOML). Defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Store directory, overriding the config.
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    /// Print machine-readable JSON.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve newline-delimited JSON requests over TCP.
    Serve {
        #[arg(long)]
        listen: Option<String>,
    },
    /// Hierarchy and membership changes, run as the local operator.
    #[command(subcommand)]
    Admin(AdminCmd),
    /// Per-user actions through the gateway endpoints.
    #[command(subcommand)]
    User(UserCmd),
    #[command(subcommand)]
    Prov(ProvCmd),
    #[command(subcommand)]
    Cvss(CvssCmd),
    #[command(subcommand)]
    Scenario(ScenarioCmd),
    #[command(subcommand)]
    Fixture(FixtureCmd),
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Role,
    Data,
}

impl From<KindArg> for NodeKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Role => NodeKind::Role,
            KindArg::Data => NodeKind::Data,
        }
    }
}

#[derive(Subcommand)]
enum AdminCmd {
    AddRole {
        id: String,
    },
    AddData {
        id: String,
    },
    AddEdge {
        #[arg(long, value_enum)]
        kind: KindArg,
        parent: String,
        child: String,
    },
    RemoveEdge {
        #[arg(long, value_enum)]
        kind: KindArg,
        parent: String,
        child: String,
    },
    RemoveNode {
        id: String,
    },
    Associate {
        role: String,
        data: String,
    },
    Dissociate {
        role: String,
        data: String,
    },
    AddUser {
        user: String,
        #[arg(long)]
        biometric_seed: Option<u64>,
    },
    Assign {
        user: String,
        role: String,
    },
    Revoke {
        user: String,
        role: String,
    },
    ReissueRs {
        role: String,
    },
    CareScope {
        role: String,
        #[arg(long)]
        off: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DimensionArg {
    AgeGender,
    ProcedureCode,
}

#[derive(Subcommand)]
enum UserCmd {
    /// Enroll a user for a role from simulated captures.
    Enroll {
        user: String,
        role: String,
        #[arg(long, default_value_t = 5)]
        samples: usize,
    },
    /// Log in with a simulated capture; prints the session token.
    Login { user: String, role: String },
    Get {
        #[arg(long)]
        token: String,
        record_id: String,
    },
    /// Store a record read from a JSON file.
    Put {
        #[arg(long)]
        token: String,
        file: PathBuf,
    },
    Cohort {
        #[arg(long)]
        token: String,
        #[arg(required = true)]
        diagnoses: Vec<String>,
    },
    Report {
        #[arg(long)]
        token: String,
        cohort_id: String,
        #[arg(long, value_enum, default_value = "age-gender")]
        dimension: DimensionArg,
    },
    Export {
        #[arg(long)]
        token: String,
        cohort_id: String,
        /// Write the XML document here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ProvCmd {
    /// Verify a record's stored provenance chain, or a chain file.
    Verify {
        /// Record id in the store.
        record_id: Option<String>,
        /// A chain file (base64 canonical records, one per line).
        #[arg(long, conflicts_with = "record_id")]
        file: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum CvssCmd {
    Score { vector: String },
}

#[derive(Subcommand)]
enum ScenarioCmd {
    /// Seed a fresh store with the suite's fixture and run every step.
    Run {
        suite: PathBuf,
        /// Where to write the JSON report.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Disable the transfer MAC check (fault injection).
        #[arg(long)]
        skip_transfer_mac: bool,
    },
}

#[derive(Subcommand)]
enum FixtureCmd {
    Seed {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        patients: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return ExitCode::from(if err.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(store) = &cli.store {
        config.store = store.clone();
    }
    Ok(config)
}

fn open(cli: &Cli) -> Result<Gateway> {
    let config = load_config(cli)?;
    let master =
        MasterKey::from_env().with_context(|| format!("set {MASTER_KEY_ENV} to 64 hex digits"))?;
    Ok(Gateway::open(config, master, Clock::System)?)
}

fn emit(cli: &Cli, response: &Response) -> u8 {
    if cli.json {
        out!(
            "{}",
            serde_json::to_string_pretty(response).unwrap_or_default()
        );
    } else if let Some(error) = &response.error {
        match &error.check {
            Some(check) => eprintln!("denied ({:?}, {check}): {}", error.kind, error.message),
            None => eprintln!("denied ({:?}): {}", error.kind, error.message),
        }
    } else if let Some(data) = &response.data {
        out!("{}", serde_json::to_string_pretty(data).unwrap_or_default());
    }
    response.exit_code()
}

fn emit_value(cli: &Cli, value: &Value, human: &str) {
    if cli.json {
        out!(
            "{}",
            serde_json::to_string_pretty(value).unwrap_or_default()
        );
    } else {
        out!("{human}");
    }
}

fn run(cli: Cli) -> Result<u8> {
    match &cli.command {
        Command::Serve { listen } => {
            let gw = open(&cli)?;
            let addr = listen
                .clone()
                .unwrap_or_else(|| gw.config().server.listen.clone());
            let server = Server::bind(gw, &addr).with_context(|| format!("binding {addr}"))?;
            eprintln!("listening on {}", server.local_addr()?);
            server.run()?;
            Ok(0)
        }
        Command::Admin(cmd) => {
            let op = admin_op(cmd);
            let mut gw = open(&cli)?;
            Ok(emit(&cli, &gw.operator(op)))
        }
        Command::User(cmd) => user(&cli, cmd),
        Command::Prov(ProvCmd::Verify { record_id, file }) => {
            prov_verify(&cli, record_id.as_deref(), file.as_deref())
        }
        Command::Cvss(CvssCmd::Score { vector }) => {
            let parsed = cvss::parse_vector(vector).map_err(|e| anyhow::anyhow!("{e}"))?;
            let score = cvss::score(&parsed);
            // Scores are always printed as JSON.
            out!("{}", serde_json::to_string_pretty(&score)?);
            Ok(0)
        }
        Command::Scenario(ScenarioCmd::Run {
            suite,
            report,
            skip_transfer_mac,
        }) => scenario_run(&cli, suite, report.as_deref(), *skip_transfer_mac),
        Command::Fixture(FixtureCmd::Seed { seed, patients }) => {
            let mut gw = open(&cli)?;
            let summary = fixture::seed(&mut gw, *seed, *patients)?;
            let value = json!({
                "store": gw.store().root(),
                "patients": summary.patients,
                "records": summary.records,
                "ibd_patients": summary.ibd_patients,
                "research_copies": summary.research_copies,
            });
            emit_value(
                &cli,
                &value,
                &format!(
                    "seeded {} patients ({} records) into {}",
                    summary.patients,
                    summary.records,
                    gw.store().root().display()
                ),
            );
            Ok(0)
        }
    }
}

fn admin_op(cmd: &AdminCmd) -> AdminOp {
    let n = |s: &String| NodeId::new(s.as_str());
    let u = |s: &String| UserId::new(s.as_str());
    match cmd {
        AdminCmd::AddRole { id } => AdminOp::AddRole { id: n(id) },
        AdminCmd::AddData { id } => AdminOp::AddData { id: n(id) },
        AdminCmd::AddEdge {
            kind,
            parent,
            child,
        } => AdminOp::AddEdge {
            kind: (*kind).into(),
            parent: n(parent),
            child: n(child),
        },
        AdminCmd::RemoveEdge {
            kind,
            parent,
            child,
        } => AdminOp::RemoveEdge {
            kind: (*kind).into(),
            parent: n(parent),
            child: n(child),
        },
        AdminCmd::RemoveNode { id } => AdminOp::RemoveNode { id: n(id) },
        AdminCmd::Associate { role, data } => AdminOp::Associate {
            role: n(role),
            data: n(data),
        },
        AdminCmd::Dissociate { role, data } => AdminOp::Dissociate {
            role: n(role),
            data: n(data),
        },
        AdminCmd::AddUser {
            user,
            biometric_seed,
        } => AdminOp::AddUser {
            user: u(user),
            biometric_seed: *biometric_seed,
        },
        AdminCmd::Assign { user, role } => AdminOp::Assign {
            user: u(user),
            role: n(role),
        },
        AdminCmd::Revoke { user, role } => AdminOp::Revoke {
            user: u(user),
            role: n(role),
        },
        AdminCmd::ReissueRs { role } => AdminOp::ReissueRs { role: n(role) },
        AdminCmd::CareScope { role, off } => AdminOp::SetCareScoped {
            role: n(role),
            scoped: !off,
        },
    }
}

fn user(cli: &Cli, cmd: &UserCmd) -> Result<u8> {
    let mut gw = open(cli)?;
    let response = match cmd {
        UserCmd::Enroll {
            user,
            role,
            samples,
        } => {
            let Some(samples) = gw.enrollment_samples(&UserId::new(user.as_str()), *samples) else {
                bail!("unknown user {user}");
            };
            gw.operator(AdminOp::Enroll {
                user: UserId::new(user.as_str()),
                role: NodeId::new(role.as_str()),
                samples,
            })
        }
        UserCmd::Login { user, role } => {
            let Some(sample) = gw.capture_sample(&UserId::new(user.as_str())) else {
                bail!("unknown user {user}");
            };
            gw.handle_local(Request::Login {
                user: UserId::new(user.as_str()),
                role: NodeId::new(role.as_str()),
                sample,
            })
        }
        UserCmd::Get { token, record_id } => gw.handle_local(Request::RecordGet {
            token: token.clone(),
            record_id: record_id.clone(),
            role_key: None,
        }),
        UserCmd::Put { token, file } => {
            let text =
                fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
            let record: ClinicalRecord = serde_json::from_str(&text).context("record file")?;
            gw.handle_local(Request::RecordPut {
                token: token.clone(),
                record,
                role_key: None,
            })
        }
        UserCmd::Cohort { token, diagnoses } => gw.handle_local(Request::Cohort {
            token: token.clone(),
            diagnoses: diagnoses.iter().cloned().collect::<BTreeSet<_>>(),
        }),
        UserCmd::Report {
            token,
            cohort_id,
            dimension,
        } => gw.handle_local(Request::Report {
            token: token.clone(),
            cohort_id: cohort_id.clone(),
            dimension: match dimension {
                DimensionArg::AgeGender => ReportDimension::AgeGender,
                DimensionArg::ProcedureCode => ReportDimension::ProcedureCode,
            },
        }),
        UserCmd::Export {
            token,
            cohort_id,
            out,
        } => {
            let mut response = gw.handle_local(Request::Export {
                token: token.clone(),
                cohort_id: cohort_id.clone(),
            });
            if let (Some(out), Some(data)) = (out, response.data.as_mut()) {
                if let Some(Value::String(document)) =
                    data.as_object_mut().and_then(|m| m.remove("document"))
                {
                    fs::write(out, document)
                        .with_context(|| format!("writing {}", out.display()))?;
                    data["written_to"] = json!(out);
                }
            }
            response
        }
    };
    Ok(emit(cli, &response))
}

fn prov_verify(cli: &Cli, record_id: Option<&str>, file: Option<&Path>) -> Result<u8> {
    let gw = open(cli)?;
    let lines = match (record_id, file) {
        (Some(id), _) => gw
            .store()
            .provenance_lines(id)?
            .with_context(|| format!("no provenance stored for {id}"))?,
        (None, Some(path)) => fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| decode_b64(l.trim()).unwrap_or_default())
            .collect(),
        (None, None) => bail!("give a record id or --file"),
    };
    let verdict = verify_serialized(&lines, gw.pubkeys());
    let value = json!({ "records": lines.len(), "verdict": verdict });
    let (human, code) = match &verdict {
        Verdict::Valid => (format!("Valid ({} records)", lines.len()), 0),
        Verdict::Invalid {
            first_bad_seq,
            reason,
        } => (format!("Invalid at seq {first_bad_seq}: {reason}"), 3),
    };
    emit_value(cli, &value, &human);
    Ok(code)
}

fn scenario_run(cli: &Cli, suite_path: &Path, report: Option<&Path>, skip_mac: bool) -> Result<u8> {
    let suite = Suite::load(suite_path)?;
    let mut config = load_config(cli)?;
    config.faults.skip_transfer_mac |= skip_mac;
    // Without an explicit store the run uses a throwaway one.
    let scratch;
    let master = if cli.store.is_some() || cli.config.is_some() {
        MasterKey::from_env().with_context(|| format!("set {MASTER_KEY_ENV} to 64 hex digits"))?
    } else {
        scratch = tempfile::tempdir()?;
        config.store = scratch.path().join("store");
        let mut key = [0u8; 32];
        OsRng.fill_bytes(&mut key);
        MasterKey::from_bytes(key)
    };
    let outcome = scenario::run_fresh(&suite, config, master)?;
    let report_path = report.map(Path::to_path_buf).unwrap_or_else(|| {
        let stem = suite_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("suite");
        PathBuf::from(format!("{stem}.report.json"))
    });
    fs::write(&report_path, serde_json::to_string_pretty(&outcome.report)?)
        .with_context(|| format!("writing {}", report_path.display()))?;
    if cli.json {
        out!("{}", serde_json::to_string_pretty(&outcome.report)?);
    } else {
        for step in &outcome.report.steps {
            out!(
                "{:4} {:<40} {:<16} expected {:<13} observed {:<13} cvss {:>4.1}",
                if step.passed { "PASS" } else { "FAIL" },
                step.id,
                format!("{:?}", step.kind),
                step.expected.to_string(),
                serde_json::to_value(step.observed)?
                    .as_str()
                    .unwrap_or_default(),
                step.cvss_base
            );
        }
        out!("{}", outcome.report.summary_line());
        out!("report written to {}", report_path.display());
    }
    Ok(if outcome.report.all_passed() { 0 } else { 1 })
}
