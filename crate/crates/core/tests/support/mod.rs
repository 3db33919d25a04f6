//! Random hierarchies and brute-force oracles shared by the property tests
//! and the acceptance suite.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use dynaswap_core::dlkm::{
    derive_key, open_edge_token, KeyStore, NodeKey, PersonalSecret, RotationReason,
};
use dynaswap_core::hierarchy::{HierarchyGraph, NodeKind};
use dynaswap_core::recordstore::{open_record, seal_record, ClinicalRecord};
use dynaswap_core::{NodeId, UserId};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A hierarchy as plain edge lists, independent of the library's graph type.
#[derive(Debug, Clone)]
pub struct Spec {
    pub roles: Vec<String>,
    pub data: Vec<String>,
    pub role_edges: Vec<(String, String)>,
    pub data_edges: Vec<(String, String)>,
    pub associations: Vec<(String, String)>,
    pub users: Vec<(String, String)>,
}

fn below(rng: &mut ChaCha8Rng, n: usize) -> usize {
    (rng.next_u64() % n as u64) as usize
}

/// Up to `max_nodes` nodes and `max_edges` token-carrying edges. Names are
/// shuffled so that lexicographic order says nothing about topology.
pub fn random_spec(seed: u64, max_nodes: usize, max_edges: usize) -> Spec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = 2 + below(&mut rng, max_nodes - 1);
    let n_roles = 1 + below(&mut rng, total - 1);
    let n_data = total - n_roles;

    let mut labels: Vec<usize> = (0..total).collect();
    for i in (1..labels.len()).rev() {
        labels.swap(i, below(&mut rng, i + 1));
    }
    let roles: Vec<String> = (0..n_roles).map(|i| format!("r{:02}", labels[i])).collect();
    let data: Vec<String> = (0..n_data)
        .map(|i| format!("d{:02}", labels[n_roles + i]))
        .collect();

    let budget = below(&mut rng, max_edges + 1);
    let mut edges: BTreeSet<(u8, usize, usize)> = BTreeSet::new();
    for _ in 0..budget * 2 {
        if edges.len() >= budget {
            break;
        }
        match below(&mut rng, 3) {
            0 if n_roles > 1 => {
                let (a, b) = (below(&mut rng, n_roles), below(&mut rng, n_roles));
                if a != b {
                    edges.insert((0, a.min(b), a.max(b)));
                }
            }
            1 if n_data > 1 => {
                let (a, b) = (below(&mut rng, n_data), below(&mut rng, n_data));
                if a != b {
                    edges.insert((1, a.min(b), a.max(b)));
                }
            }
            _ if n_data > 0 => {
                edges.insert((2, below(&mut rng, n_roles), below(&mut rng, n_data)));
            }
            _ => {}
        }
    }
    let mut spec = Spec {
        roles,
        data,
        role_edges: Vec::new(),
        data_edges: Vec::new(),
        associations: Vec::new(),
        users: Vec::new(),
    };
    for (kind, a, b) in edges {
        match kind {
            0 => spec
                .role_edges
                .push((spec.roles[a].clone(), spec.roles[b].clone())),
            1 => spec
                .data_edges
                .push((spec.data[a].clone(), spec.data[b].clone())),
            _ => spec
                .associations
                .push((spec.roles[a].clone(), spec.data[b].clone())),
        }
    }
    for (i, role) in spec.roles.clone().iter().enumerate() {
        for j in 0..1 + below(&mut rng, 2) {
            spec.users.push((format!("u{i:02}_{j}"), role.clone()));
        }
    }
    spec
}

pub fn build(spec: &Spec) -> HierarchyGraph {
    let mut graph = HierarchyGraph::new();
    for r in &spec.roles {
        graph.add_node(NodeKind::Role, r.as_str().into()).unwrap();
    }
    for d in &spec.data {
        graph.add_node(NodeKind::Data, d.as_str().into()).unwrap();
    }
    for (a, b) in &spec.role_edges {
        graph
            .add_edge(NodeKind::Role, a.as_str().into(), b.as_str().into())
            .unwrap();
    }
    for (a, b) in &spec.data_edges {
        graph
            .add_edge(NodeKind::Data, a.as_str().into(), b.as_str().into())
            .unwrap();
    }
    for (r, d) in &spec.associations {
        graph
            .associate(r.as_str().into(), d.as_str().into())
            .unwrap();
    }
    for (user, role) in &spec.users {
        let user = UserId::from(user.as_str());
        if !graph.has_user(&user) {
            graph.add_user(user.clone()).unwrap();
        }
        graph.assign(&user, role.as_str().into()).unwrap();
    }
    graph
}

/// Reflexive-transitive closure over every token-carrying edge, by
/// Floyd-Warshall on an adjacency matrix.
#[allow(clippy::needless_range_loop)]
pub fn closure(spec: &Spec) -> BTreeMap<String, BTreeSet<String>> {
    let names: Vec<&String> = spec.roles.iter().chain(&spec.data).collect();
    let index: BTreeMap<&String, usize> = names.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    let n = names.len();
    let mut reach = vec![vec![false; n]; n];
    for (i, row) in reach.iter_mut().enumerate() {
        row[i] = true;
    }
    for (a, b) in spec
        .role_edges
        .iter()
        .chain(&spec.data_edges)
        .chain(&spec.associations)
    {
        reach[index[a]][index[b]] = true;
    }
    for k in 0..n {
        for i in 0..n {
            if reach[i][k] {
                for j in 0..n {
                    if reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let set = (0..n)
                .filter(|&j| reach[i][j])
                .map(|j| names[j].clone())
                .collect();
            ((*name).clone(), set)
        })
        .collect()
}

/// Data nodes reachable from `role` in the closure.
pub fn accessible_data(
    spec: &Spec,
    closure: &BTreeMap<String, BTreeSet<String>>,
    role: &str,
) -> BTreeSet<String> {
    closure[role]
        .iter()
        .filter(|n| spec.data.contains(n))
        .cloned()
        .collect()
}

pub fn node(name: &str) -> NodeId {
    NodeId::from(name)
}

/// Graph plus provisioned keys, secrets and wraps for every assigned user.
pub struct Keyed {
    pub spec: Spec,
    pub graph: HierarchyGraph,
    pub keys: KeyStore,
    pub secrets: BTreeMap<UserId, PersonalSecret>,
    pub rng: ChaCha8Rng,
}

pub fn keyed(spec: Spec, seed: u64) -> Keyed {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let graph = build(&spec);
    let mut keys = KeyStore::new();
    keys.provision(&graph, &mut rng);
    let mut secrets = BTreeMap::new();
    for (user, roles) in graph.users() {
        let secret = PersonalSecret::generate(user.clone(), &mut rng);
        for role in roles {
            keys.issue_wrap(&graph, &secret, role, &mut rng).unwrap();
        }
        secrets.insert(user.clone(), secret);
    }
    Keyed {
        spec,
        graph,
        keys,
        secrets,
        rng,
    }
}

/// Node names whose current key `start` derives.
pub fn derivable_from(keys: &KeyStore, all: &[String], start: &NodeKey) -> BTreeSet<String> {
    all.iter()
        .filter(|t| derive_key(start, &node(t), keys.tokens()).is_ok())
        .cloned()
        .collect()
}

#[derive(Debug, Default, PartialEq, Eq)]
pub struct DerivationOutcome {
    /// Start nodes whose derivable set differs from reachability.
    pub mismatched_starts: usize,
    pub non_descendant_pairs: usize,
    /// Non-descendant pairs where derivation wrongly succeeded.
    pub non_descendant_derived: usize,
    pub pairs: usize,
}

/// Compares derivation from every node against the brute-force closure.
pub fn derivation_check(seed: u64, max_nodes: usize, max_edges: usize) -> DerivationOutcome {
    let k = keyed(random_spec(seed, max_nodes, max_edges), seed);
    let reach = closure(&k.spec);
    let all: Vec<String> = k.spec.roles.iter().chain(&k.spec.data).cloned().collect();
    let mut out = DerivationOutcome::default();
    for s in &all {
        let start = k.keys.node_key(&node(s)).unwrap().clone();
        let derivable = derivable_from(&k.keys, &all, &start);
        if derivable != reach[s] {
            out.mismatched_starts += 1;
        }
        for t in &all {
            out.pairs += 1;
            if !reach[s].contains(t) {
                out.non_descendant_pairs += 1;
                if derivable.contains(t) {
                    out.non_descendant_derived += 1;
                }
            }
        }
    }
    out
}

#[derive(Debug, Default, PartialEq, Eq)]
pub struct EpisodeOutcome {
    pub rotated: usize,
    /// Current-version ciphertexts the revoked user's cached keys opened.
    pub ciphertexts_opened: usize,
    pub ciphertexts_tried: usize,
    /// Current keys the revoked user's cached keys derived or unwrapped.
    pub current_keys_recovered: usize,
    /// Current tokens opened by a cached key relabelled to the token's version.
    pub tokens_opened: usize,
    /// Remaining members whose derivable set is not exactly their closure.
    pub members_wrong: usize,
    pub members_checked: usize,
}

fn probe_record(data: &str) -> ClinicalRecord {
    ClinicalRecord {
        record_id: format!("probe-{data}"),
        patient_id: "probe".into(),
        data_node: node(data),
        attending: BTreeSet::new(),
        fields: BTreeMap::from([("note".to_string(), "probe".to_string())]),
        observations: Vec::new(),
        diagnoses: Vec::new(),
        procedures: Vec::new(),
    }
}

/// Revokes a random user's only role, rotates, and measures what that
/// user's cached keys still reach.
pub fn revocation_episode(seed: u64) -> EpisodeOutcome {
    let mut k = keyed(random_spec(seed, 40, 80), seed);
    let all: Vec<String> = k.spec.roles.iter().chain(&k.spec.data).cloned().collect();
    let (victim, role) =
        k.spec.users[(k.rng.next_u64() % k.spec.users.len() as u64) as usize].clone();
    let victim = UserId::from(victim.as_str());

    // Everything the victim could have cached before revocation.
    let role_key = k
        .keys
        .unwrap_role_key(&k.secrets[&victim], &node(&role))
        .unwrap();
    let cached: Vec<NodeKey> = all
        .iter()
        .filter_map(|t| derive_key(&role_key, &node(t), k.keys.tokens()).ok())
        .collect();

    k.graph.revoke(&victim, &node(&role)).unwrap();
    let report = k
        .keys
        .rotate_on_change(
            &k.graph,
            &node(&role),
            RotationReason::UserRevoked,
            &k.secrets,
            &mut k.rng,
        )
        .unwrap();

    let mut out = EpisodeOutcome {
        rotated: report.rotated.len(),
        ..Default::default()
    };
    let current: Vec<NodeKey> = k.keys.current_keys().cloned().collect();
    let probes: Vec<_> = k
        .spec
        .data
        .iter()
        .map(|d| {
            seal_record(
                &probe_record(d),
                k.keys.node_key(&node(d)).unwrap(),
                &mut k.rng,
            )
        })
        .collect();

    for old in &cached {
        for sealed in &probes {
            out.ciphertexts_tried += 1;
            // Relabel the cached key as the probe's node and version so that
            // only the key bytes decide.
            let relabelled = NodeKey::new(
                sealed.data_node.clone(),
                sealed.key_version,
                old.secret().clone(),
            );
            if open_record(sealed, &relabelled).is_ok() {
                out.ciphertexts_opened += 1;
            }
        }
        for t in &all {
            if let Ok(derived) = derive_key(old, &node(t), k.keys.tokens()) {
                if current.contains(&derived) {
                    out.current_keys_recovered += 1;
                }
            }
        }
        for token in k.keys.tokens().iter() {
            let relabelled = NodeKey::new(
                token.parent.clone(),
                token.parent_version,
                old.secret().clone(),
            );
            if let Ok(child) = open_edge_token(&relabelled, token) {
                if current.contains(&child) {
                    out.tokens_opened += 1;
                }
            }
        }
    }
    if k.keys
        .unwrap_role_key(&k.secrets[&victim], &node(&role))
        .is_ok()
    {
        out.current_keys_recovered += 1;
    }

    let reach = closure(&k.spec);
    for (user, roles) in k.graph.users() {
        for held in roles {
            out.members_checked += 1;
            let Ok(key) = k.keys.unwrap_role_key(&k.secrets[user], held) else {
                out.members_wrong += 1;
                continue;
            };
            if derivable_from(&k.keys, &all, &key) != reach[held.as_str()] {
                out.members_wrong += 1;
            }
        }
    }
    out
}

use dynaswap_core::provenance::{
    verify_serialized, FailureReason, NewRecord, OpKind, ProvenanceChain, ProvenanceRecord, Verdict,
};
use ed25519_dalek::{SigningKey, VerifyingKey};

/// A signed chain of `len` records alternating between two actors.
pub fn sample_chain(len: usize) -> (Vec<ProvenanceRecord>, BTreeMap<UserId, VerifyingKey>) {
    let signers = [
        (UserId::from("dr_a"), SigningKey::from_bytes(&[1; 32])),
        (UserId::from("nurse_b"), SigningKey::from_bytes(&[2; 32])),
    ];
    let mut chain = ProvenanceChain::new();
    for i in 0..len {
        let (actor, key) = &signers[i % 2];
        chain
            .append(
                NewRecord {
                    data_ref: "rec-0042".into(),
                    actor: actor.clone(),
                    role: node(if i % 2 == 0 { "Physician" } else { "RN" }),
                    op_kind: OpKind::ALL[i % OpKind::ALL.len()],
                    state_hash: dynaswap_core::sha256(&(i as u64).to_be_bytes()),
                    timestamp: 1_602_460_800 + 60 * i as u64,
                },
                key,
            )
            .unwrap();
    }
    let keys = signers
        .iter()
        .map(|(u, k)| (u.clone(), k.verifying_key()))
        .collect();
    (chain.records().to_vec(), keys)
}

#[derive(Debug, Default, PartialEq, Eq)]
pub struct SweepOutcome {
    pub flips: usize,
    pub detected: usize,
    /// Detections whose first_bad_seq is the flipped record.
    pub localized: usize,
    pub by_reason: BTreeMap<String, usize>,
}

/// Flips every bit of every record's canonical bytes, one at a time.
pub fn bit_flip_sweep(len: usize) -> SweepOutcome {
    let (records, keys) = sample_chain(len);
    let pristine: Vec<Vec<u8>> = records
        .iter()
        .map(ProvenanceRecord::canonical_bytes)
        .collect();
    assert_eq!(verify_serialized(&pristine, &keys), Verdict::Valid);
    let mut out = SweepOutcome::default();
    let mut tampered = pristine.clone();
    for i in 0..pristine.len() {
        for bit in 0..pristine[i].len() * 8 {
            tampered[i][bit / 8] ^= 1 << (bit % 8);
            out.flips += 1;
            if let Verdict::Invalid {
                first_bad_seq,
                reason,
            } = verify_serialized(&tampered, &keys)
            {
                out.detected += 1;
                if first_bad_seq == i as u64 {
                    out.localized += 1;
                }
                let reason: &str = match reason {
                    FailureReason::Sequence => "sequence",
                    FailureReason::Link => "link",
                    FailureReason::Signature => "signature",
                    FailureReason::UnknownActor => "unknown-actor",
                    FailureReason::Malformed => "malformed",
                };
                *out.by_reason.entry(reason.to_string()).or_default() += 1;
            }
            tampered[i][bit / 8] ^= 1 << (bit % 8);
        }
    }
    out
}

use dynaswap_core::biocap::{
    calibrate_threshold, synth_sample, BiocapConfig, BiocapError, CapsuleRegistry, FeatureVector,
};

#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub genuine_trials: usize,
    pub false_rejects: usize,
    pub impostor_trials: usize,
    pub false_accepts: usize,
    pub cross_rs_trials: usize,
    pub cross_rs_accepts: usize,
}

impl OperatingPoint {
    pub fn frr(&self) -> f64 {
        self.false_rejects as f64 / self.genuine_trials as f64
    }

    pub fn far(&self) -> f64 {
        self.false_accepts as f64 / self.impostor_trials as f64
    }

    pub fn cross_rs_rate(&self) -> f64 {
        self.cross_rs_accepts as f64 / self.cross_rs_trials as f64
    }
}

const ENROLL_DRAWS: u64 = 5;
const CALIBRATION_DRAW: u64 = 1_000_000;
const TRIAL_DRAW: u64 = 2_000_000;

/// Enrolls `users` synthetic users under one role's RS, calibrates τ on a
/// held-out set, then runs `trials` genuine and `trials` impostor logins
/// through `authenticate`, and compares every user's capsule across
/// `reissues` RS replacements.
pub fn operating_point(
    seed: u64,
    users: u64,
    dim: usize,
    sigma: f64,
    trials: usize,
    reissues: usize,
) -> OperatingPoint {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let role = node("Clinician");
    let mut graph = HierarchyGraph::new();
    graph.add_node(NodeKind::Role, role.clone()).unwrap();
    let ids: Vec<UserId> = (0..users)
        .map(|u| UserId::from(format!("user{u:03}")))
        .collect();
    let user_seed = |u: u64| seed.wrapping_mul(1_000_003).wrapping_add(u);
    for id in &ids {
        graph.add_user(id.clone()).unwrap();
        graph.assign(id, role.clone()).unwrap();
    }
    let enrollment: Vec<Vec<FeatureVector>> = (0..users)
        .map(|u| {
            (0..ENROLL_DRAWS)
                .map(|d| synth_sample(user_seed(u), d, sigma, dim))
                .collect()
        })
        .collect();

    let mut registry = CapsuleRegistry::new();
    registry
        .reissue_rs(&graph, &role, dim, 0, &mut rng)
        .unwrap();
    for (id, samples) in ids.iter().zip(&enrollment) {
        registry.enroll(&graph, id, &role, samples).unwrap();
    }

    let impostor_of = |i: usize, rng: &mut ChaCha8Rng| -> u64 {
        let offset = 1 + rng.next_u64() % (users - 1);
        (i as u64 + offset) % users
    };

    // Calibration on draws never used for evaluation.
    let per_user = (trials / users as usize).max(1);
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for (i, id) in ids.iter().enumerate() {
        for d in 0..per_user as u64 {
            let own = synth_sample(user_seed(i as u64), CALIBRATION_DRAW + d, sigma, dim);
            genuine.push(registry.match_score(id, &role, &own).unwrap());
            let other = impostor_of(i, &mut rng);
            let foreign = synth_sample(user_seed(other), CALIBRATION_DRAW + d, sigma, dim);
            impostor.push(registry.match_score(id, &role, &foreign).unwrap());
        }
    }
    let calibration = calibrate_threshold(&genuine, &impostor);
    let config = BiocapConfig {
        dim,
        threshold: calibration.threshold,
        ..BiocapConfig::default()
    };

    let mut out = OperatingPoint {
        threshold: calibration.threshold,
        genuine_trials: 0,
        false_rejects: 0,
        impostor_trials: 0,
        false_accepts: 0,
        cross_rs_trials: 0,
        cross_rs_accepts: 0,
    };
    for t in 0..trials {
        let i = t % users as usize;
        let d = (t / users as usize) as u64;
        let own = synth_sample(user_seed(i as u64), TRIAL_DRAW + d, sigma, dim);
        out.genuine_trials += 1;
        match registry.authenticate(&graph, &config, &ids[i], &role, &own, 0, &mut rng) {
            Ok(grant) => assert_eq!(grant.role, role),
            Err(BiocapError::MatchBelowThreshold { .. }) => out.false_rejects += 1,
            Err(e) => panic!("unexpected {e}"),
        }
        let other = impostor_of(i, &mut rng);
        let foreign = synth_sample(user_seed(other), TRIAL_DRAW + d, sigma, dim);
        out.impostor_trials += 1;
        match registry.authenticate(&graph, &config, &ids[i], &role, &foreign, 0, &mut rng) {
            Ok(_) => out.false_accepts += 1,
            Err(BiocapError::MatchBelowThreshold { .. }) => {}
            Err(e) => panic!("unexpected {e}"),
        }
    }

    for _ in 0..reissues {
        let old: Vec<FeatureVector> = ids
            .iter()
            .map(|id| registry.capsule(id, &role).unwrap().fused.clone())
            .collect();
        registry
            .reissue_rs(&graph, &role, dim, 0, &mut rng)
            .unwrap();
        for ((id, samples), stolen) in ids.iter().zip(&enrollment).zip(&old) {
            assert!(matches!(
                registry.match_score(id, &role, &samples[0]),
                Err(BiocapError::StaleCapsule)
            ));
            let fresh = registry.enroll(&graph, id, &role, samples).unwrap();
            out.cross_rs_trials += 1;
            if stolen.cosine(&fresh.fused).unwrap() >= calibration.threshold {
                out.cross_rs_accepts += 1;
            }
        }
    }
    out
}
