mod support;

use std::collections::{BTreeMap, BTreeSet};

use dynaswap_core::biocap::SessionGrant;
use dynaswap_core::dlkm::NodeKey;
use dynaswap_core::provenance::{verify_chain, OpKind, Verdict};
use dynaswap_core::recordstore::{
    seal_record, AccessEnv, ClinicalRecord, DenyReason, Finding, IdentifierScanner, Observation,
    RecordError, RecordStore, ReportDimension, Requester, SafeHarborCategory, DENY_LIST,
};
use dynaswap_core::UserId;
use ed25519_dalek::VerifyingKey;
use proptest::prelude::*;
use rand_chacha::rand_core::RngCore;
use regex::Regex;
use support::{closure, keyed, node, random_spec, Keyed};

// 2020-10-12T00:00:00Z
const NOW: u64 = 1_602_460_800;

fn grant(user: &UserId, role: &str) -> SessionGrant {
    SessionGrant {
        user: user.clone(),
        role: node(role),
        issued_at: NOW,
        expires_at: NOW + 1800,
        token: [1; 32],
    }
}

fn plain_record(id: &str, data: &str, attending: BTreeSet<UserId>) -> ClinicalRecord {
    ClinicalRecord {
        record_id: id.into(),
        patient_id: format!("pt-{id}"),
        data_node: node(data),
        attending,
        fields: BTreeMap::from([("note".to_string(), format!("MARKER-{id}"))]),
        observations: Vec::new(),
        diagnoses: Vec::new(),
        procedures: Vec::new(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn reads_succeed_iff_reachable_derivable_and_in_scope(seed in any::<u64>()) {
        let mut k = keyed(random_spec(seed, 20, 40), seed);
        if k.spec.data.is_empty() {
            return Ok(());
        }
        let users: Vec<UserId> = k.graph.users().map(|(u, _)| u.clone()).collect();
        let scoped: BTreeSet<String> = k.spec.roles.iter().filter(|_| k.rng.next_u32().is_multiple_of(2)).cloned().collect();
        let mut records = Vec::new();
        for (i, data) in k.spec.data.iter().enumerate() {
            let attending: BTreeSet<UserId> = users.iter().filter(|_| k.rng.next_u32().is_multiple_of(3)).cloned().collect();
            let record = plain_record(&format!("rec{i}"), data, attending);
            let key = k.keys.node_key(&node(data)).unwrap().clone();
            records.push(seal_record(&record, &key, &mut k.rng));
        }
        let mut store = RecordStore::from_parts(records.clone(), BTreeMap::new(), Vec::new());
        for role in &scoped {
            store.set_care_scoped(node(role), true);
        }
        let reach = closure(&k.spec);
        for (user, role) in k.spec.users.clone() {
            let user = UserId::from(user.as_str());
            let session = grant(&user, &role);
            let role_key = k.keys.unwrap_role_key(&k.secrets[&user], &node(&role)).unwrap();
            let signer = k.secrets[&user].signing_key().clone();
            let req = Requester { session: &session, role_key: &role_key, signer: &signer, now: NOW };
            let env = AccessEnv { graph: &k.graph, keys: &k.keys };
            for sealed in &records {
                let reachable = reach[&role].contains(sealed.data_node.as_str());
                let in_scope = !scoped.contains(&role) || sealed.attending.contains(&user);
                let got = store.get_record(env, req, &sealed.record_id);
                prop_assert_eq!(got.is_ok(), reachable && in_scope, "{} as {} on {}: {:?}", user, role, sealed.data_node, got);
                if !reachable {
                    prop_assert_eq!(got, Err(RecordError::Unauthorized(DenyReason::NotReachable)));
                }
            }
            // A forged role key for the right node and version derives nothing.
            let forged = NodeKey::new(node(&role), role_key.version(), dynaswap_core::dlkm::SecretKey::from_bytes([9; 32]));
            let req = Requester { role_key: &forged, ..req };
            for sealed in &records {
                prop_assert!(store.get_record(env, req, &sealed.record_id).is_err());
            }
        }
    }
}

/// Independent pattern oracle for residual identifiers.
struct PatternScanner(Vec<(SafeHarborCategory, Regex)>);

impl PatternScanner {
    fn new() -> Self {
        let rules = [
            (
                SafeHarborCategory::Phone,
                r"\(?\b\d{3}\)?[-. ]\d{3}[-. ]\d{4}\b",
            ),
            (SafeHarborCategory::Ssn, r"\b\d{3}-\d{2}-\d{4}\b"),
            (SafeHarborCategory::Email, r"[\w.+-]+@[\w-]+\.[\w.]+"),
            (SafeHarborCategory::IpAddress, r"\b\d{1,3}(\.\d{1,3}){3}\b"),
            (
                SafeHarborCategory::Date,
                r"\b\d{4}-\d{2}-\d{2}\b|\b\d{1,2}/\d{1,2}/\d{4}\b",
            ),
            (SafeHarborCategory::Url, r"https?://"),
        ];
        Self(
            rules
                .into_iter()
                .map(|(c, r)| (c, Regex::new(r).unwrap()))
                .collect(),
        )
    }
}

impl IdentifierScanner for PatternScanner {
    fn scan(&self, text: &str) -> Vec<Finding> {
        self.0
            .iter()
            .filter_map(|(category, re)| {
                re.find(text).map(|m| Finding {
                    category: *category,
                    matched: m.as_str().to_string(),
                })
            })
            .collect()
    }
}

/// Twenty patients alternating between Chart and Vitals; records 0, 3, 6, ... 18 carry IBD (7 of them).
fn ward() -> (Keyed, RecordStore, Vec<ClinicalRecord>) {
    let mut spec = random_spec(0, 2, 0);
    spec.roles = vec!["Physician".into(), "Nurse".into()];
    spec.data = vec!["Chart".into(), "Vitals".into()];
    spec.role_edges = vec![("Physician".into(), "Nurse".into())];
    spec.data_edges = vec![("Chart".into(), "Vitals".into())];
    spec.associations = vec![
        ("Physician".into(), "Chart".into()),
        ("Nurse".into(), "Vitals".into()),
    ];
    spec.users = vec![
        ("dr".into(), "Physician".into()),
        ("rn".into(), "Nurse".into()),
    ];
    let k = keyed(spec, 1);
    let mut records = Vec::new();
    for i in 0..20 {
        let data = if i % 2 == 0 { "Chart" } else { "Vitals" };
        let mut r = plain_record(
            &format!("p{i:02}"),
            data,
            BTreeSet::from([UserId::from("dr")]),
        );
        let year = 1925 + 4 * i;
        r.fields = DENY_LIST
            .iter()
            .flat_map(|(_, names)| names.iter())
            .map(|name| (name.to_string(), format!("MARKER-{name}-{i}")))
            .collect();
        r.fields
            .insert("birth_date".into(), format!("{year}-04-02"));
        r.fields.insert("phone".into(), "317-555-0100".into());
        r.fields.insert("email".into(), "jane@example.org".into());
        r.fields.insert("ip_address".into(), "10.0.0.7".into());
        r.fields.insert("ssn".into(), "123-45-6789".into());
        r.fields
            .insert("url".into(), "https://patient.example.org".into());
        r.fields
            .insert("gender".into(), if i % 3 == 0 { "F" } else { "M" }.into());
        r.fields.insert("state".into(), "IN".into());
        r.observations = vec![Observation {
            code: "HR".into(),
            value: format!("{}", 60 + i),
        }];
        r.diagnoses = if i % 3 == 0 {
            vec!["IBD".into(), "UC".into()]
        } else {
            vec!["HTN".into()]
        };
        r.procedures = match i % 4 {
            0 => vec!["COLONOSCOPY".into(), "BIOPSY".into()],
            1 => vec!["ECG".into()],
            2 => vec![],
            _ => vec!["BIOPSY".into()],
        };
        records.push(r);
    }
    (k, RecordStore::new(), records)
}

struct Actor {
    session: SessionGrant,
    key: NodeKey,
    signer: ed25519_dalek::SigningKey,
}

fn actor(k: &Keyed, user: &str, role: &str) -> Actor {
    let user = UserId::from(user);
    Actor {
        session: grant(&user, role),
        key: k
            .keys
            .unwrap_role_key(&k.secrets[&user], &node(role))
            .unwrap(),
        signer: k.secrets[&user].signing_key().clone(),
    }
}

impl Actor {
    fn req(&self) -> Requester<'_> {
        Requester {
            session: &self.session,
            role_key: &self.key,
            signer: &self.signer,
            now: NOW,
        }
    }
}

#[test]
fn cohort_report_and_export_on_the_ward() {
    let (mut k, mut store, records) = ward();
    let dr = actor(&k, "dr", "Physician");
    let rn = actor(&k, "rn", "Nurse");
    for r in &records {
        let env = AccessEnv {
            graph: &k.graph,
            keys: &k.keys,
        };
        store.put_record(env, dr.req(), r, &mut k.rng).unwrap();
    }
    let env = AccessEnv {
        graph: &k.graph,
        keys: &k.keys,
    };
    let ibd = BTreeSet::from(["IBD".to_string()]);

    let cohort = store.query_cohort(env, dr.req(), &ibd).unwrap();
    let expected: Vec<String> = records
        .iter()
        .filter(|r| r.diagnoses.contains(&"IBD".to_string()))
        .map(|r| r.record_id.clone())
        .collect();
    assert_eq!(cohort.members, expected);
    assert_eq!(cohort.members.len(), 7);

    let nurse_cohort = store.query_cohort(env, rn.req(), &ibd).unwrap();
    let visible: Vec<String> = expected
        .iter()
        .filter(|id| {
            records
                .iter()
                .any(|r| &r.record_id == *id && r.data_node.as_str() == "Vitals")
        })
        .cloned()
        .collect();
    assert_eq!(nurse_cohort.members, visible);
    assert!(store
        .query_cohort(env, dr.req(), &BTreeSet::new())
        .unwrap()
        .members
        .is_empty());

    // Births 1925, 1937, ..., 1997 are aged 95, 83, 71, 59, 47, 35, 23 on 2020-10-12.
    let report = store
        .aggregate_report(env, dr.req(), &cohort.cohort_id, ReportDimension::AgeGender)
        .unwrap();
    let rows: Vec<(Vec<&str>, usize)> = report
        .rows
        .iter()
        .map(|r| (r.key.iter().map(String::as_str).collect(), r.count))
        .collect();
    assert_eq!(
        rows,
        vec![
            (vec!["20-29", "F"], 1),
            (vec!["30-39", "F"], 1),
            (vec!["40-49", "F"], 1),
            (vec!["50-59", "F"], 1),
            (vec!["70-79", "F"], 1),
            (vec!["80-89", "F"], 1),
            (vec!["90+", "F"], 1),
        ]
    );
    let procedures = store
        .aggregate_report(
            env,
            dr.req(),
            &cohort.cohort_id,
            ReportDimension::ProcedureCode,
        )
        .unwrap();
    assert_eq!(procedures.total(), 7);
    let proc_rows: Vec<(&str, usize)> = procedures
        .rows
        .iter()
        .map(|r| (r.key[0].as_str(), r.count))
        .collect();
    // i = 0, 3, 6, 9, 12, 15, 18 -> i % 4 = 0, 3, 2, 1, 0, 3, 2
    assert_eq!(
        proc_rows,
        vec![("BIOPSY", 2), ("COLONOSCOPY", 2), ("ECG", 1), ("none", 2)]
    );

    let chains_before: usize = store.chains().map(|(_, c)| c.len()).sum();
    let scanner = PatternScanner::new();
    let xml = store
        .export_deidentified(env, dr.req(), &cohort.cohort_id, &scanner)
        .unwrap();
    assert!(scanner.scan(&xml).is_empty(), "{:?}", scanner.scan(&xml));
    for (_, names) in DENY_LIST {
        for name in *names {
            assert!(!xml.contains(&format!("name=\"{name}\"")), "{name} leaked");
            assert!(
                !xml.contains(&format!("MARKER-{name}-")),
                "{name} value leaked"
            );
        }
    }
    assert!(!xml.contains("p00") && !xml.contains("pt-"));
    assert!(xml.contains("<birthYear>1937</birthYear>"));
    assert!(xml.contains("<age>90+</age>") && !xml.contains("1925"));
    let chains_after: usize = store.chains().map(|(_, c)| c.len()).sum();
    assert_eq!(chains_after, chains_before + 7);
}

#[test]
fn export_aborts_on_residual_identifier() {
    let (mut k, mut store, mut records) = ward();
    let dr = actor(&k, "dr", "Physician");
    records[0].observations.push(Observation {
        code: "NOTE".into(),
        value: "call 317-555-0199".into(),
    });
    for r in &records {
        let env = AccessEnv {
            graph: &k.graph,
            keys: &k.keys,
        };
        store.put_record(env, dr.req(), r, &mut k.rng).unwrap();
    }
    let env = AccessEnv {
        graph: &k.graph,
        keys: &k.keys,
    };
    let cohort = store
        .query_cohort(env, dr.req(), &BTreeSet::from(["IBD".to_string()]))
        .unwrap();
    let before: usize = store.chains().map(|(_, c)| c.len()).sum();
    assert_eq!(
        store.export_deidentified(env, dr.req(), &cohort.cohort_id, &PatternScanner::new()),
        Err(RecordError::ResidualIdentifier {
            category: SafeHarborCategory::Phone
        })
    );
    assert_eq!(store.chains().map(|(_, c)| c.len()).sum::<usize>(), before);
}

#[test]
fn every_mutation_has_one_provenance_record() {
    let (mut k, mut store, records) = ward();
    let dr = actor(&k, "dr", "Physician");
    let rn = actor(&k, "rn", "Nurse");
    let mut mutations = 0;
    for round in 0..3 {
        for r in &records {
            let env = AccessEnv {
                graph: &k.graph,
                keys: &k.keys,
            };
            let writer = if round == 1 && r.data_node.as_str() == "Vitals" {
                &rn
            } else {
                &dr
            };
            let mut r = r.clone();
            r.observations.push(Observation {
                code: "ROUND".into(),
                value: round.to_string(),
            });
            if store.put_record(env, writer.req(), &r, &mut k.rng).is_ok() {
                mutations += 1;
            }
        }
        // Denied writes leave no trace.
        let env = AccessEnv {
            graph: &k.graph,
            keys: &k.keys,
        };
        assert!(store
            .put_record(env, rn.req(), &records[0], &mut k.rng)
            .is_err());
    }
    let keys: BTreeMap<UserId, VerifyingKey> = k
        .secrets
        .iter()
        .map(|(u, s)| (u.clone(), s.verifying_key()))
        .collect();
    let total: usize = store.chains().map(|(_, c)| c.len()).sum();
    assert_eq!(total, mutations);
    for (_, chain) in store.chains() {
        assert_eq!(verify_chain(chain.records(), &keys), Verdict::Valid);
        assert_eq!(chain.records()[0].op_kind, OpKind::Create);
        assert!(chain.records()[1..]
            .iter()
            .all(|r| r.op_kind == OpKind::Update));
        let sealed = store.sealed_record(&chain.records()[0].data_ref).unwrap();
        assert_eq!(
            chain.records().last().unwrap().state_hash,
            sealed.state_hash()
        );
    }
    for sealed in store.sealed() {
        let haystack = String::from_utf8_lossy(&sealed.ciphertext).into_owned();
        assert!(!haystack.contains("MARKER"));
    }
}
