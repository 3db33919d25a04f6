//! BioCapsule one-step authentication and authorization.
//!
//! Each role owns exactly one active Reference Subject (RS). A user's
//! BioCapsule for a role is the element-wise product of their enrollment
//! template and the role's RS features, renormalized. Logging in fuses a
//! fresh sample with the same RS and compares it to the stored capsule; a
//! match proves identity and grants the role in the same step, because only
//! that role's RS produces the capsule.
//!
//! Replacing a role's RS cancels every capsule enrolled under it.
//!
//! The fusion is a functional stand-in, not a template-protection scheme:
//! capsules are not claimed to be non-invertible.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand_chacha::ChaCha20Rng;
use rand_core::{CryptoRngCore, RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto;
use crate::hierarchy::{HierarchyGraph, NodeKind};
use crate::ids::{NodeId, UserId};

pub const FEATURE_DIM: usize = 512;
pub const UNIT_NORM_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_THRESHOLD: f64 = 0.85;
pub const DEFAULT_SESSION_TTL_SECS: u64 = 30 * 60;
pub const MIN_ENROLL_SAMPLES: usize = 3;
const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BiocapError {
    #[error("feature dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("fused vector has norm below 1e-12")]
    DegenerateFusion,
    #[error("feature vector has a non-finite entry")]
    NonFinite,
    #[error("feature vector norm {norm} is not 1")]
    NotUnitNorm { norm: f64 },
    #[error("feature vector is empty or zero")]
    ZeroVector,
    #[error("user {user} does not hold role {role}")]
    NotAssigned { user: UserId, role: NodeId },
    #[error("unknown role {0}")]
    UnknownRole(NodeId),
    #[error("role {0} has no active reference subject")]
    NoActiveRs(NodeId),
    #[error("enrollment needs at least {MIN_ENROLL_SAMPLES} samples, got {0}")]
    TooFewSamples(usize),
    #[error("user {user} is not enrolled for role {role}")]
    NotEnrolled { user: UserId, role: NodeId },
    #[error("capsule was enrolled under a superseded reference subject")]
    StaleCapsule,
    #[error("biometric match {score:.4} below threshold {threshold}")]
    MatchBelowThreshold { score: f64, threshold: f64 },
}

/// A finite, unit-norm real vector.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    /// Accepts `values` only if already unit-norm within [`UNIT_NORM_TOLERANCE`].
    pub fn new(values: Vec<f64>) -> Result<Self, BiocapError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BiocapError::NonFinite);
        }
        let norm = l2_norm(&values);
        if values.is_empty() || norm == 0.0 {
            return Err(BiocapError::ZeroVector);
        }
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(BiocapError::NotUnitNorm { norm });
        }
        Ok(Self(values))
    }

    /// Scales `values` to unit norm.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self, BiocapError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BiocapError::NonFinite);
        }
        let norm = l2_norm(&values);
        if values.is_empty() || norm == 0.0 {
            return Err(BiocapError::ZeroVector);
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Cosine similarity; both operands are unit-norm so this is the dot product
    /// divided by the (≈1) norms, kept exact for drifted inputs.
    pub fn cosine(&self, other: &Self) -> Result<f64, BiocapError> {
        check_dims(self, other)?;
        let dot: f64 = self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum();
        Ok(dot / (l2_norm(&self.0) * l2_norm(&other.0)))
    }
}

impl TryFrom<Vec<f64>> for FeatureVector {
    type Error = BiocapError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<FeatureVector> for Vec<f64> {
    fn from(v: FeatureVector) -> Self {
        v.0
    }
}

impl fmt::Debug for FeatureVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FeatureVector(dim={})", self.0.len())
    }
}

fn l2_norm(values: &[f64]) -> f64 {
    libm::sqrt(values.iter().map(|v| v * v).sum())
}

fn check_dims(a: &FeatureVector, b: &FeatureVector) -> Result<(), BiocapError> {
    if a.dim() != b.dim() {
        return Err(BiocapError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(())
}

/// Element-wise product of user and RS features, renormalized.
pub fn fuse(user: &FeatureVector, rs: &FeatureVector) -> Result<FeatureVector, BiocapError> {
    check_dims(user, rs)?;
    let product: Vec<f64> = user.0.iter().zip(&rs.0).map(|(u, r)| u * r).collect();
    if l2_norm(&product) < DEGENERATE_NORM {
        return Err(BiocapError::DegenerateFusion);
    }
    FeatureVector::normalized(product)
}

fn gaussian_unit(rng: &mut dyn RngCore, dim: usize) -> FeatureVector {
    loop {
        let values: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if let Ok(v) = FeatureVector::normalized(values) {
            return v;
        }
    }
}

/// The synthetic user's centroid: a normalized standard-Gaussian vector from `user_seed`.
pub fn synth_centroid(user_seed: u64, dim: usize) -> FeatureVector {
    gaussian_unit(&mut ChaCha20Rng::seed_from_u64(user_seed), dim)
}

/// Draw number `draw` of synthetic user `user_seed`.
///
/// `normalize(centroid + e)` with `e ~ N(0, σ²/dim)` per component, so the
/// perturbation has expected norm ≈ σ. Deterministic in `(seed, draw, σ)`.
pub fn synth_sample(user_seed: u64, draw: u64, noise_sigma: f64, dim: usize) -> FeatureVector {
    assert!(noise_sigma >= 0.0, "noise_sigma must be non-negative");
    let centroid = synth_centroid(user_seed, dim);
    if noise_sigma == 0.0 {
        return centroid;
    }
    let mut rng = ChaCha20Rng::seed_from_u64(user_seed);
    rng.set_stream(draw.wrapping_add(1));
    let scale = noise_sigma / libm::sqrt(dim as f64);
    let values: Vec<f64> = centroid
        .0
        .iter()
        .map(|c| {
            let e: f64 = StandardNormal.sample(&mut rng);
            c + scale * e
        })
        .collect();
    FeatureVector::normalized(values).unwrap_or(centroid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSubject {
    pub rs_id: String,
    pub role: NodeId,
    pub features: FeatureVector,
    pub created_at: u64,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BioCapsule {
    pub user: UserId,
    pub role: NodeId,
    pub rs_id: String,
    pub fused: FeatureVector,
}

/// Bearer grant for exactly one role.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionGrant {
    pub user: UserId,
    pub role: NodeId,
    pub issued_at: u64,
    pub expires_at: u64,
    pub token: [u8; 32],
}

impl SessionGrant {
    pub fn is_expired(&self, now: u64) -> bool {
        now >= self.expires_at
    }
}

impl fmt::Debug for SessionGrant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SessionGrant")
            .field("user", &self.user)
            .field("role", &self.role)
            .field("issued_at", &self.issued_at)
            .field("expires_at", &self.expires_at)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiocapConfig {
    pub dim: usize,
    pub threshold: f64,
    pub session_ttl_secs: u64,
}

impl Default for BiocapConfig {
    fn default() -> Self {
        Self {
            dim: FEATURE_DIM,
            threshold: DEFAULT_THRESHOLD,
            session_ttl_secs: DEFAULT_SESSION_TTL_SECS,
        }
    }
}

/// Reference subjects and enrolled capsules.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CapsuleRegistry {
    subjects: BTreeMap<String, ReferenceSubject>,
    active: BTreeMap<NodeId, String>,
    capsules: BTreeMap<UserId, BTreeMap<NodeId, BioCapsule>>,
}

impl CapsuleRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn subjects(&self) -> impl Iterator<Item = &ReferenceSubject> {
        self.subjects.values()
    }

    pub fn active_rs(&self, role: &NodeId) -> Option<&ReferenceSubject> {
        self.subjects.get(self.active.get(role)?)
    }

    pub fn capsules(&self) -> impl Iterator<Item = &BioCapsule> {
        self.capsules.values().flat_map(BTreeMap::values)
    }

    pub fn capsule(&self, user: &UserId, role: &NodeId) -> Option<&BioCapsule> {
        self.capsules.get(user)?.get(role)
    }

    /// Creates a fresh random RS for `role` and supersedes the previous one.
    /// Capsules enrolled under the old RS become stale.
    pub fn reissue_rs(
        &mut self,
        graph: &HierarchyGraph,
        role: &NodeId,
        dim: usize,
        now: u64,
        rng: &mut dyn CryptoRngCore,
    ) -> Result<&ReferenceSubject, BiocapError> {
        if graph.kind_of(role) != Some(NodeKind::Role) {
            return Err(BiocapError::UnknownRole(role.clone()));
        }
        let rs_id = loop {
            let candidate = hex32(&crypto::random_bytes32(rng)[..16]);
            if !self.subjects.contains_key(&candidate) {
                break candidate;
            }
        };
        let features = gaussian_unit(rng.as_rngcore(), dim);
        if let Some(old) = self
            .active
            .get(role)
            .and_then(|id| self.subjects.get_mut(id))
        {
            old.active = false;
        }
        self.subjects.insert(
            rs_id.clone(),
            ReferenceSubject {
                rs_id: rs_id.clone(),
                role: role.clone(),
                features,
                created_at: now,
                active: true,
            },
        );
        self.active.insert(role.clone(), rs_id.clone());
        Ok(&self.subjects[&rs_id])
    }

    /// Stores `fuse(template, RS)` where the template is the normalized mean of `samples`.
    pub fn enroll(
        &mut self,
        graph: &HierarchyGraph,
        user: &UserId,
        role: &NodeId,
        samples: &[FeatureVector],
    ) -> Result<&BioCapsule, BiocapError> {
        if !graph.holds_role(user, role) {
            return Err(BiocapError::NotAssigned {
                user: user.clone(),
                role: role.clone(),
            });
        }
        let rs = self
            .active_rs(role)
            .ok_or_else(|| BiocapError::NoActiveRs(role.clone()))?;
        let template = enrollment_template(samples)?;
        let capsule = BioCapsule {
            user: user.clone(),
            role: role.clone(),
            rs_id: rs.rs_id.clone(),
            fused: fuse(&template, &rs.features)?,
        };
        let slot = self.capsules.entry(user.clone()).or_default();
        slot.insert(role.clone(), capsule);
        Ok(&slot[role])
    }

    pub fn remove_capsule(&mut self, user: &UserId, role: &NodeId) -> Option<BioCapsule> {
        let slot = self.capsules.get_mut(user)?;
        let removed = slot.remove(role);
        if slot.is_empty() {
            self.capsules.remove(user);
        }
        removed
    }

    /// Drops the role's RS binding and all capsules for it (role deleted).
    pub fn forget_role(&mut self, role: &NodeId) {
        if let Some(id) = self.active.remove(role) {
            if let Some(rs) = self.subjects.get_mut(&id) {
                rs.active = false;
            }
        }
        self.capsules.retain(|_, slot| {
            slot.remove(role);
            !slot.is_empty()
        });
    }

    /// Cosine between the fused fresh sample and the stored capsule.
    pub fn match_score(
        &self,
        user: &UserId,
        role: &NodeId,
        sample: &FeatureVector,
    ) -> Result<f64, BiocapError> {
        let capsule = self
            .capsule(user, role)
            .ok_or_else(|| BiocapError::NotEnrolled {
                user: user.clone(),
                role: role.clone(),
            })?;
        let rs = self
            .active_rs(role)
            .ok_or_else(|| BiocapError::NoActiveRs(role.clone()))?;
        if capsule.rs_id != rs.rs_id {
            return Err(BiocapError::StaleCapsule);
        }
        fuse(sample, &rs.features)?.cosine(&capsule.fused)
    }

    /// One-step login: a match against `role`'s capsule both authenticates
    /// `user` and authorizes the role.
    pub fn authenticate(
        &self,
        graph: &HierarchyGraph,
        config: &BiocapConfig,
        user: &UserId,
        role: &NodeId,
        sample: &FeatureVector,
        now: u64,
        rng: &mut dyn CryptoRngCore,
    ) -> Result<SessionGrant, BiocapError> {
        if !graph.holds_role(user, role) {
            return Err(BiocapError::NotAssigned {
                user: user.clone(),
                role: role.clone(),
            });
        }
        let score = self.match_score(user, role, sample)?;
        if score < config.threshold {
            return Err(BiocapError::MatchBelowThreshold {
                score,
                threshold: config.threshold,
            });
        }
        Ok(SessionGrant {
            user: user.clone(),
            role: role.clone(),
            issued_at: now,
            expires_at: now.saturating_add(config.session_ttl_secs),
            token: crypto::random_bytes32(rng),
        })
    }
}

/// Normalized mean of at least [`MIN_ENROLL_SAMPLES`] equal-dimension samples.
pub fn enrollment_template(samples: &[FeatureVector]) -> Result<FeatureVector, BiocapError> {
    if samples.len() < MIN_ENROLL_SAMPLES {
        return Err(BiocapError::TooFewSamples(samples.len()));
    }
    let dim = samples[0].dim();
    let mut sum = alloc::vec![0.0; dim];
    for sample in samples {
        check_dims(&samples[0], sample)?;
        sum.iter_mut().zip(&sample.0).for_each(|(acc, v)| *acc += v);
    }
    if samples.iter().all(|s| s == &samples[0]) {
        return Ok(samples[0].clone());
    }
    FeatureVector::normalized(sum)
}

fn hex32(bytes: &[u8]) -> String {
    const DIGITS: &[u8; 16] = b"0123456789abcdef";
    bytes
        .iter()
        .flat_map(|b| {
            [
                DIGITS[usize::from(b >> 4)] as char,
                DIGITS[usize::from(b & 0xf)] as char,
            ]
        })
        .collect()
}

/// Live sessions keyed by bearer token.
#[derive(Debug, Clone, Default)]
pub struct SessionTable {
    sessions: BTreeMap<[u8; 32], SessionGrant>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum SessionError {
    #[error("unknown session token")]
    Unknown,
    #[error("session expired")]
    Expired,
}

impl SessionTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, grant: SessionGrant) {
        self.sessions.insert(grant.token, grant);
    }

    pub fn validate(&self, token: &[u8; 32], now: u64) -> Result<&SessionGrant, SessionError> {
        let grant = self.sessions.get(token).ok_or(SessionError::Unknown)?;
        if grant.is_expired(now) {
            return Err(SessionError::Expired);
        }
        Ok(grant)
    }

    /// Extends a live session by `ttl` from `now`.
    pub fn renew(
        &mut self,
        token: &[u8; 32],
        now: u64,
        ttl: u64,
    ) -> Result<&SessionGrant, SessionError> {
        let grant = self.sessions.get_mut(token).ok_or(SessionError::Unknown)?;
        if grant.is_expired(now) {
            return Err(SessionError::Expired);
        }
        grant.expires_at = now.saturating_add(ttl);
        Ok(grant)
    }

    pub fn remove(&mut self, token: &[u8; 32]) -> Option<SessionGrant> {
        self.sessions.remove(token)
    }

    /// Ends every session of `user` in `role`; returns how many were dropped.
    pub fn end_role_sessions(&mut self, user: &UserId, role: &NodeId) -> usize {
        let before = self.sessions.len();
        self.sessions
            .retain(|_, g| !(&g.user == user && &g.role == role));
        before - self.sessions.len()
    }

    pub fn purge_expired(&mut self, now: u64) -> usize {
        let before = self.sessions.len();
        self.sessions.retain(|_, g| !g.is_expired(now));
        before - self.sessions.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SessionGrant> {
        self.sessions.values()
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }
}

/// Result of a threshold sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    /// Fraction of impostor scores ≥ threshold.
    pub far: f64,
    /// Fraction of genuine scores < threshold.
    pub frr: f64,
}

/// False accept and false reject rates of `threshold` on the given scores.
pub fn error_rates(genuine: &[f64], impostor: &[f64], threshold: f64) -> (f64, f64) {
    let far =
        impostor.iter().filter(|s| **s >= threshold).count() as f64 / impostor.len().max(1) as f64;
    let frr =
        genuine.iter().filter(|s| **s < threshold).count() as f64 / genuine.len().max(1) as f64;
    (far, frr)
}

/// Sweeps thresholds to the equal-error point.
///
/// Candidates are every observed score. The chosen threshold minimizes
/// `max(FAR, FRR)`; when several candidates tie (in particular when the two
/// populations separate cleanly) the midpoint of the tied interval is used.
pub fn calibrate_threshold(genuine: &[f64], impostor: &[f64]) -> Calibration {
    let sorted = |scores: &[f64]| {
        let mut v: Vec<f64> = scores.iter().copied().filter(|s| s.is_finite()).collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let (genuine, impostor) = (sorted(genuine), sorted(impostor));
    let mut candidates: Vec<f64> = genuine.iter().chain(&impostor).copied().collect();
    // A threshold just above the top impostor score separates it from the genuine tail.
    let above: Vec<f64> = candidates
        .iter()
        .map(|c| libm::nextafter(*c, f64::INFINITY))
        .collect();
    candidates.extend(above);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    if candidates.is_empty() {
        return Calibration {
            threshold: DEFAULT_THRESHOLD,
            far: 0.0,
            frr: 0.0,
        };
    }

    let rates = |t: f64| {
        let far = (impostor.len() - impostor.partition_point(|s| *s < t)) as f64
            / impostor.len().max(1) as f64;
        let frr = genuine.partition_point(|s| *s < t) as f64 / genuine.len().max(1) as f64;
        (far, frr)
    };
    let cost = |t: f64| {
        let (far, frr) = rates(t);
        far.max(frr)
    };
    let costs: Vec<f64> = candidates.iter().map(|t| cost(*t)).collect();
    let best = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let low = candidates[costs.iter().position(|c| *c == best).expect("non-empty")];
    let high = candidates[costs.iter().rposition(|c| *c == best).expect("non-empty")];
    let mut threshold = (low + high) / 2.0;
    if cost(threshold) != best {
        threshold = low;
    }
    let (far, frr) = rates(threshold);
    Calibration {
        threshold,
        far,
        frr,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::NodeKind;
    use alloc::vec;

    const SIGMA: f64 = 0.1;

    fn n(id: &str) -> NodeId {
        NodeId::from(id)
    }

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(11)
    }

    fn graph_with(users: &[(&str, &str)]) -> HierarchyGraph {
        let mut g = HierarchyGraph::new();
        for (_, role) in users {
            let _ = g.add_node(NodeKind::Role, n(role));
        }
        for (user, role) in users {
            let u = UserId::from(*user);
            let _ = g.add_user(u.clone());
            g.assign(&u, n(role)).unwrap();
        }
        g
    }

    fn samples(seed: u64, count: u64) -> Vec<FeatureVector> {
        (0..count)
            .map(|d| synth_sample(seed, d, SIGMA, FEATURE_DIM))
            .collect()
    }

    #[test]
    fn fuse_uniform_vector_is_fixed_point() {
        let v =
            FeatureVector::new(vec![1.0 / libm::sqrt(FEATURE_DIM as f64); FEATURE_DIM]).unwrap();
        let fused = fuse(&v, &v).unwrap();
        for (a, b) in fused.as_slice().iter().zip(v.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn fuse_dimension_mismatch_and_degenerate() {
        let a = synth_centroid(1, 8);
        let b = synth_centroid(1, 9);
        assert_eq!(
            fuse(&a, &b),
            Err(BiocapError::DimensionMismatch { left: 8, right: 9 })
        );
        let x = FeatureVector::new(vec![1.0, 0.0]).unwrap();
        let y = FeatureVector::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(fuse(&x, &y), Err(BiocapError::DegenerateFusion));
    }

    #[test]
    fn different_rs_give_unrelated_capsules() {
        let mut r = rng();
        let trials = 1000;
        let mut total = 0.0;
        for i in 0..trials {
            let u = synth_centroid(10_000 + i, FEATURE_DIM);
            let r1 = gaussian_unit(&mut r, FEATURE_DIM);
            let r2 = gaussian_unit(&mut r, FEATURE_DIM);
            total += fuse(&u, &r1)
                .unwrap()
                .cosine(&fuse(&u, &r2).unwrap())
                .unwrap()
                .abs();
        }
        assert!(
            total / (trials as f64) < 0.2,
            "mean |cos| = {}",
            total / trials as f64
        );
    }

    #[test]
    fn synthetic_samples_are_deterministic() {
        assert_eq!(
            synth_sample(3, 0, 0.0, FEATURE_DIM),
            synth_centroid(3, FEATURE_DIM)
        );
        assert_eq!(
            synth_sample(3, 5, SIGMA, FEATURE_DIM),
            synth_sample(3, 5, SIGMA, FEATURE_DIM)
        );
        assert_ne!(
            synth_sample(3, 5, SIGMA, FEATURE_DIM),
            synth_sample(3, 6, SIGMA, FEATURE_DIM)
        );
    }

    #[test]
    fn distinct_centroids_are_nearly_orthogonal() {
        let mut near = 0;
        let trials = 2000u64;
        for i in 0..trials {
            let c = synth_centroid(2 * i, FEATURE_DIM)
                .cosine(&synth_centroid(2 * i + 1, FEATURE_DIM))
                .unwrap();
            if c.abs() >= 0.2 {
                near += 1;
            }
        }
        // P(|cos| ≥ 0.2) at d = 512 is about 6e-6; allow at most 0.1%.
        assert!(near as f64 / trials as f64 <= 0.001);
    }

    #[test]
    fn template_of_identical_samples_and_noisy_centroid() {
        let s = synth_sample(5, 0, SIGMA, FEATURE_DIM);
        assert_eq!(
            enrollment_template(&[s.clone(), s.clone(), s.clone()]).unwrap(),
            s
        );
        assert_eq!(
            enrollment_template(&[s.clone(), s.clone()]),
            Err(BiocapError::TooFewSamples(2))
        );
        let template = enrollment_template(&samples(77, 5)).unwrap();
        assert!(template.cosine(&synth_centroid(77, FEATURE_DIM)).unwrap() > 0.99);
    }

    #[test]
    fn enroll_requires_role_and_rs() {
        let g = graph_with(&[("alice", "Physician"), ("bob", "RN")]);
        let mut reg = CapsuleRegistry::new();
        let alice = UserId::from("alice");
        assert_eq!(
            reg.enroll(&g, &alice, &n("Physician"), &samples(1, 3)),
            Err(BiocapError::NoActiveRs(n("Physician")))
        );
        reg.reissue_rs(&g, &n("Physician"), FEATURE_DIM, 0, &mut rng())
            .unwrap();
        assert_eq!(
            reg.enroll(&g, &alice, &n("RN"), &samples(1, 3)),
            Err(BiocapError::NotAssigned {
                user: alice.clone(),
                role: n("RN")
            })
        );
        reg.enroll(&g, &alice, &n("Physician"), &samples(1, 3))
            .unwrap();
    }

    #[test]
    fn login_accepts_template_rejects_impostor_and_stale() {
        let g = graph_with(&[("alice", "Physician"), ("mallory", "Physician")]);
        let mut reg = CapsuleRegistry::new();
        let cfg = BiocapConfig::default();
        let mut r = rng();
        let alice = UserId::from("alice");
        let role = n("Physician");
        reg.reissue_rs(&g, &role, FEATURE_DIM, 0, &mut r).unwrap();
        let enrolled = samples(1, 4);
        reg.enroll(&g, &alice, &role, &enrolled).unwrap();

        let template = enrollment_template(&enrolled).unwrap();
        assert!((reg.match_score(&alice, &role, &template).unwrap() - 1.0).abs() < 1e-12);
        let grant = reg
            .authenticate(&g, &cfg, &alice, &role, &template, 100, &mut r)
            .unwrap();
        assert_eq!(grant.role, role);
        assert_eq!(grant.expires_at, 100 + DEFAULT_SESSION_TTL_SECS);

        let impostor = synth_sample(2, 0, SIGMA, FEATURE_DIM);
        assert!(matches!(
            reg.authenticate(&g, &cfg, &alice, &role, &impostor, 100, &mut r),
            Err(BiocapError::MatchBelowThreshold { .. })
        ));
        assert!(matches!(
            reg.authenticate(
                &g,
                &cfg,
                &UserId::from("mallory"),
                &role,
                &template,
                100,
                &mut r
            ),
            Err(BiocapError::NotEnrolled { .. })
        ));

        let first = reg.active_rs(&role).unwrap().rs_id.clone();
        reg.reissue_rs(&g, &role, FEATURE_DIM, 5, &mut r).unwrap();
        let second = reg.active_rs(&role).unwrap().rs_id.clone();
        assert_ne!(first, second);
        assert_eq!(reg.subjects().filter(|s| s.active).count(), 1);
        assert_eq!(
            reg.authenticate(&g, &cfg, &alice, &role, &template, 100, &mut r),
            Err(BiocapError::StaleCapsule)
        );
    }

    #[test]
    fn session_table_expiry_and_renewal() {
        let mut table = SessionTable::new();
        let grant = SessionGrant {
            user: UserId::from("u"),
            role: n("R"),
            issued_at: 0,
            expires_at: 10,
            token: [1; 32],
        };
        table.insert(grant.clone());
        assert_eq!(table.validate(&[1; 32], 9).unwrap(), &grant);
        assert_eq!(table.validate(&[1; 32], 10), Err(SessionError::Expired));
        assert_eq!(table.validate(&[2; 32], 0), Err(SessionError::Unknown));
        table.renew(&[1; 32], 5, 10).unwrap();
        assert!(table.validate(&[1; 32], 14).is_ok());
        assert_eq!(table.end_role_sessions(&UserId::from("u"), &n("R")), 1);
    }

    #[test]
    fn calibration_lands_between_separated_populations() {
        let genuine = [0.97, 0.98, 0.99];
        let impostor = [0.01, 0.05, 0.1];
        let cal = calibrate_threshold(&genuine, &impostor);
        assert!(cal.threshold > 0.1 && cal.threshold <= 0.97);
        assert_eq!((cal.far, cal.frr), (0.0, 0.0));

        let overlapping = calibrate_threshold(&[0.5, 0.6, 0.7, 0.8], &[0.4, 0.55, 0.65, 0.3]);
        assert!(overlapping.far <= 0.5 && overlapping.frr <= 0.5);
    }

    #[test]
    fn feature_vector_validation() {
        assert_eq!(
            FeatureVector::new(vec![1.0, 1.0]),
            Err(BiocapError::NotUnitNorm {
                norm: libm::sqrt(2.0)
            })
        );
        assert_eq!(
            FeatureVector::new(vec![f64::NAN]),
            Err(BiocapError::NonFinite)
        );
        assert_eq!(
            FeatureVector::normalized(vec![0.0, 0.0]),
            Err(BiocapError::ZeroVector)
        );
        let json = serde_json::to_string(&synth_centroid(4, 4)).unwrap();
        let back: FeatureVector = serde_json::from_str(&json).unwrap();
        assert_eq!(back, synth_centroid(4, 4));
        assert!(serde_json::from_str::<FeatureVector>("[1.0, 1.0]").is_err());
    }
}
