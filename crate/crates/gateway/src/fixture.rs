//! Seeded synthetic clinic: the role and data hierarchy, staff with
//! enrolled capsules, and patient records written through the endpoints.

use std::collections::{BTreeMap, BTreeSet};

use dynaswap_core::hierarchy::NodeKind;
use dynaswap_core::recordstore::{ClinicalRecord, Observation};
use dynaswap_core::{NodeId, UserId};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde_json::Value;

use crate::api::{AdminOp, Request, Response};
use crate::gateway::Gateway;

pub const ADMIN: &str = "admin";
pub const PHYSICIANS: [&str; 2] = ["dr_adams", "dr_baker"];
pub const NURSES: [&str; 2] = ["rn_chen", "rn_diaz"];
pub const AIDE: &str = "cna_evans";
pub const RESEARCHER: &str = "res_fox";

/// ICD-10 codes for Crohn's disease and ulcerative colitis.
pub const IBD_CODES: [&str; 2] = ["K50.90", "K51.90"];
const OTHER_CODES: [&str; 5] = ["I10", "E11.9", "J45.909", "M54.5", "F41.1"];
const IBD_PROCEDURES: [&str; 2] = ["COLONOSCOPY", "BIOPSY"];
const OTHER_PROCEDURES: [&str; 3] = ["ECG", "SPIROMETRY", "XRAY-CHEST"];

const ENROLL_SAMPLES: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("store at {0} already holds a hierarchy")]
    AlreadySeeded(String),
    #[error("fixture step {step} failed: {message}")]
    Step { step: String, message: String },
}

#[derive(Debug, Clone, Default)]
pub struct FixtureSummary {
    pub patients: usize,
    pub records: usize,
    /// Plaintext identifier values planted in the records. None of them may
    /// ever appear in a persisted file or in an export.
    pub markers: Vec<String>,
    /// Patients whose chart carries an IBD or UC diagnosis.
    pub ibd_patients: usize,
    pub research_copies: usize,
}

fn expect_ok(step: impl Into<String>, response: Response) -> Result<Value, FixtureError> {
    match (response.ok, response.data, response.error) {
        (true, data, _) => Ok(data.unwrap_or(Value::Null)),
        (false, _, error) => Err(FixtureError::Step {
            step: step.into(),
            message: error.map_or_else(|| "unknown error".into(), |e| e.message),
        }),
    }
}

fn node(id: &str) -> NodeId {
    NodeId::new(id)
}

fn user(id: &str) -> UserId {
    UserId::new(id)
}

/// Seeds an empty store. Deterministic for a given seed and patient count,
/// up to the gateway's own randomness (keys, nonces).
pub fn seed(gw: &mut Gateway, seed: u64, patients: usize) -> Result<FixtureSummary, FixtureError> {
    if gw.graph().node_count() > 0 {
        return Err(FixtureError::AlreadySeeded(
            gw.store().root().display().to_string(),
        ));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let admin_role = gw.config().admin_role.clone();

    let mut ops = vec![AdminOp::AddRole {
        id: node(&admin_role),
    }];
    for role in ["Physician", "RN", "CNA", "Researcher"] {
        ops.push(AdminOp::AddRole { id: node(role) });
    }
    for data in ["FullRecord", "Notes", "Demographics", "ResearchSet"] {
        ops.push(AdminOp::AddData { id: node(data) });
    }
    for (kind, parent, child) in [
        (NodeKind::Role, "Physician", "RN"),
        (NodeKind::Role, "RN", "CNA"),
        (NodeKind::Data, "FullRecord", "Notes"),
        (NodeKind::Data, "Notes", "Demographics"),
        (NodeKind::Data, "FullRecord", "ResearchSet"),
    ] {
        ops.push(AdminOp::AddEdge {
            kind,
            parent: node(parent),
            child: node(child),
        });
    }
    for (role, data) in [
        ("Physician", "FullRecord"),
        ("RN", "Notes"),
        ("CNA", "Demographics"),
        ("Researcher", "ResearchSet"),
    ] {
        ops.push(AdminOp::Associate {
            role: node(role),
            data: node(data),
        });
    }
    for role in ["Physician", "RN"] {
        ops.push(AdminOp::SetCareScoped {
            role: node(role),
            scoped: true,
        });
    }
    let staff: Vec<(&str, Vec<String>)> = vec![
        (ADMIN, vec![admin_role.clone()]),
        (PHYSICIANS[0], vec!["Physician".into()]),
        (PHYSICIANS[1], vec!["Physician".into()]),
        (NURSES[0], vec!["RN".into()]),
        (NURSES[1], vec!["RN".into(), "CNA".into()]),
        (AIDE, vec!["CNA".into()]),
        (RESEARCHER, vec!["Researcher".into()]),
    ];
    for (name, roles) in &staff {
        ops.push(AdminOp::AddUser {
            user: user(name),
            biometric_seed: Some(rng.gen()),
        });
        for role in roles {
            ops.push(AdminOp::Assign {
                user: user(name),
                role: node(role),
            });
        }
    }
    for op in ops {
        let label = op.name();
        expect_ok(label, gw.operator(op))?;
    }
    for (name, roles) in &staff {
        for role in roles {
            let samples = gw
                .enrollment_samples(&user(name), ENROLL_SAMPLES)
                .ok_or_else(|| FixtureError::Step {
                    step: format!("enroll {name}"),
                    message: "no simulated biometric source".into(),
                })?;
            let op = AdminOp::Enroll {
                user: user(name),
                role: node(role),
                samples,
            };
            expect_ok(format!("enroll {name} as {role}"), gw.operator(op))?;
        }
    }

    let mut tokens = BTreeMap::new();
    for physician in PHYSICIANS {
        tokens.insert(physician, login(gw, physician, "Physician")?);
    }

    let mut summary = FixtureSummary {
        patients,
        ..FixtureSummary::default()
    };
    for i in 0..patients {
        let physician = PHYSICIANS[i % 2];
        let nurse = NURSES[i % 2];
        let attending: BTreeSet<UserId> = [user(physician), user(nurse)].into();
        let patient = Patient::generate(&mut rng, i);
        summary
            .markers
            .extend(patient.identifiers.values().cloned());
        summary.ibd_patients += usize::from(patient.ibd);

        let mut records =
            vec![patient.chart(format!("rec-{i:04}"), node("FullRecord"), &attending)];
        records.push(patient.note(format!("note-{i:04}"), &attending));
        if patient.consent {
            records.push(patient.chart(format!("rsc-{i:04}"), node("ResearchSet"), &attending));
            summary.research_copies += 1;
        }
        for record in records {
            let step = format!("put {}", record.record_id);
            let request = Request::RecordPut {
                token: tokens[physician].clone(),
                record,
                role_key: None,
            };
            expect_ok(step, gw.handle_local(request))?;
            summary.records += 1;
        }
    }
    for token in tokens.into_values() {
        expect_ok("logout", gw.handle_local(Request::Logout { token }))?;
    }
    summary.markers.sort();
    summary.markers.dedup();
    Ok(summary)
}

/// Logs `name` in through the login endpoint with a fresh simulated capture.
pub fn login(gw: &mut Gateway, name: &str, role: &str) -> Result<String, FixtureError> {
    let sample = gw
        .capture_sample(&user(name))
        .ok_or_else(|| FixtureError::Step {
            step: format!("login {name}"),
            message: "no simulated biometric source".into(),
        })?;
    let data = expect_ok(
        format!("login {name}"),
        gw.handle_local(Request::Login {
            user: user(name),
            role: node(role),
            sample,
        }),
    )?;
    Ok(data["token"].as_str().unwrap_or_default().to_string())
}

struct Patient {
    identifiers: BTreeMap<&'static str, String>,
    clinical: BTreeMap<&'static str, String>,
    observations: Vec<Observation>,
    diagnoses: Vec<String>,
    procedures: Vec<String>,
    ibd: bool,
    consent: bool,
}

const GIVEN: [&str; 8] = [
    "Avery", "Jordan", "Riley", "Morgan", "Casey", "Quinn", "Harper", "Rowan",
];
const FAMILY: [&str; 8] = [
    "Okafor",
    "Lindqvist",
    "Moreau",
    "Tanaka",
    "Castillo",
    "Novak",
    "Brennan",
    "Haddad",
];
const STREETS: [&str; 6] = [
    "Maple",
    "Meridian",
    "Delaware",
    "Walnut",
    "Lockerbie",
    "Fall Creek",
];
const CITIES: [&str; 4] = ["Indianapolis", "Carmel", "Fishers", "Greenwood"];

impl Patient {
    fn generate(rng: &mut ChaCha20Rng, index: usize) -> Self {
        // Every identifier value carries a unique tag so that leaks are
        // unambiguous when storage and exports are scanned.
        let tag = format!("phi{:08x}", rng.gen::<u32>());
        let digits = |rng: &mut ChaCha20Rng, n: usize| -> String {
            (0..n)
                .map(|_| char::from(b'0' + rng.gen_range(0..10u8)))
                .collect()
        };
        let given = *GIVEN.choose(rng).expect("non-empty");
        let family = *FAMILY.choose(rng).expect("non-empty");
        let birth_year = rng.gen_range(1928..2006);
        let birth_date = format!(
            "{birth_year}-{:02}-{:02}",
            rng.gen_range(1..=12),
            rng.gen_range(1..=28)
        );
        let admission = format!(
            "2025-{:02}-{:02}",
            rng.gen_range(1..=12),
            rng.gen_range(1..=28)
        );

        let mut identifiers = BTreeMap::new();
        identifiers.insert("name", format!("{given} {family} {tag}"));
        identifiers.insert(
            "address",
            format!(
                "{} {} Street {tag}",
                rng.gen_range(10..9999),
                STREETS.choose(rng).expect("non-empty")
            ),
        );
        identifiers.insert(
            "city",
            format!("{} {tag}", CITIES.choose(rng).expect("non-empty")),
        );
        identifiers.insert("zip", format!("462{}-{}", digits(rng, 2), digits(rng, 4)));
        identifiers.insert("birth_date", birth_date);
        identifiers.insert("admission_date", admission);
        identifiers.insert("phone", format!("(317) 555-{}", digits(rng, 4)));
        identifiers.insert("fax", format!("(317) 556-{}", digits(rng, 4)));
        identifiers.insert(
            "email",
            format!("{}.{tag}@example.org", given.to_lowercase()),
        );
        identifiers.insert(
            "ssn",
            format!("{}-{}-{}", digits(rng, 3), digits(rng, 2), digits(rng, 4)),
        );
        identifiers.insert("mrn", format!("MRN {}", digits(rng, 8)));
        identifiers.insert("health_plan_id", format!("HPN-{}", tag.to_uppercase()));
        identifiers.insert("account_number", format!("ACCT-{}", digits(rng, 9)));
        identifiers.insert("license_number", format!("LIC-IN{}", digits(rng, 7)));
        identifiers.insert("vin", format!("1HGCM8263{}", digits(rng, 8)));
        identifiers.insert("device_id", format!("DEV-{}", tag.to_uppercase()));
        identifiers.insert("url", format!("https://portal.example.org/p/{tag}"));
        identifiers.insert(
            "ip_address",
            format!(
                "10.{}.{}.{}",
                rng.gen_range(0..256),
                rng.gen_range(0..256),
                rng.gen_range(1..255)
            ),
        );
        identifiers.insert("biometric_id", format!("BIO-{}", tag.to_uppercase()));
        identifiers.insert("photo", format!("face_{tag}.jpg"));
        identifiers.insert("national_id", format!("NID-{}", digits(rng, 9)));

        let mut clinical = BTreeMap::new();
        clinical.insert(
            "gender",
            ["F", "M"].choose(rng).expect("non-empty").to_string(),
        );
        clinical.insert(
            "race",
            ["white", "black", "asian", "hispanic", "other"]
                .choose(rng)
                .expect("non-empty")
                .to_string(),
        );
        clinical.insert(
            "blood_type",
            ["A+", "A-", "B+", "O+", "O-", "AB+"]
                .choose(rng)
                .expect("non-empty")
                .to_string(),
        );
        clinical.insert(
            "smoking_status",
            ["never", "former", "current"]
                .choose(rng)
                .expect("non-empty")
                .to_string(),
        );
        clinical.insert(
            "last_lab_date",
            format!(
                "2025-{:02}-{:02}",
                rng.gen_range(1..=12),
                rng.gen_range(1..=28)
            ),
        );

        // A third of the patients carry an IBD or UC diagnosis.
        let ibd = index.is_multiple_of(3);
        let mut diagnoses = Vec::new();
        let mut procedures = Vec::new();
        if ibd {
            diagnoses.push(IBD_CODES[index / 3 % 2].to_string());
            procedures.push(IBD_PROCEDURES.choose(rng).expect("non-empty").to_string());
        }
        diagnoses.push(OTHER_CODES.choose(rng).expect("non-empty").to_string());
        procedures.push(OTHER_PROCEDURES.choose(rng).expect("non-empty").to_string());
        diagnoses.dedup();

        let observations = vec![
            Observation {
                code: "718-7".into(),
                value: format!("{:.1}", rng.gen_range(10.0..17.0)),
            },
            Observation {
                code: "8480-6".into(),
                value: format!("{}", rng.gen_range(95..170)),
            },
            Observation {
                code: "2345-7".into(),
                value: format!("{}", rng.gen_range(70..200)),
            },
        ];
        Self {
            identifiers,
            clinical,
            observations,
            diagnoses,
            procedures,
            ibd,
            consent: ibd || rng.gen_bool(0.5),
        }
    }

    fn patient_id(&self) -> String {
        format!(
            "pid-{}",
            self.identifiers["health_plan_id"][4..].to_lowercase()
        )
    }

    fn chart(
        &self,
        record_id: String,
        data_node: NodeId,
        attending: &BTreeSet<UserId>,
    ) -> ClinicalRecord {
        let mut fields: BTreeMap<String, String> = self
            .identifiers
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect();
        fields.extend(
            self.clinical
                .iter()
                .map(|(k, v)| (k.to_string(), v.clone())),
        );
        ClinicalRecord {
            record_id,
            patient_id: self.patient_id(),
            data_node,
            attending: attending.clone(),
            fields,
            observations: self.observations.clone(),
            diagnoses: self.diagnoses.clone(),
            procedures: self.procedures.clone(),
        }
    }

    /// Progress note: vitals only, no diagnoses, so cohort queries count charts.
    fn note(&self, record_id: String, attending: &BTreeSet<UserId>) -> ClinicalRecord {
        let mut fields = BTreeMap::new();
        fields.insert("name".to_string(), self.identifiers["name"].clone());
        fields.insert("note_kind".to_string(), "progress".to_string());
        ClinicalRecord {
            record_id,
            patient_id: self.patient_id(),
            data_node: node("Notes"),
            attending: attending.clone(),
            fields,
            observations: self.observations[1..].to_vec(),
            diagnoses: Vec::new(),
            procedures: Vec::new(),
        }
    }
}
