//! CVSS v3.0 vectors and scores.
//!
//! ```
//! use dynaswap_core::cvss::{parse_vector, score, Severity};
//!
//! let v = parse_vector("CVSS:3.0/AV:N/AC:L/PR:N/UI:N/S:U/C:H/I:H/A:H").unwrap();
//! let s = score(&v);
//! assert_eq!(s.base, 9.8);
//! assert_eq!(s.severity, Severity::Critical);
//! ```

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PREFIX: &str = "CVSS:3.0/";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CvssError {
    #[error("malformed vector: {0}")]
    MalformedVector(String),
    #[error("missing base metric {0}")]
    MissingBaseMetric(&'static str),
    #[error("illegal value {value:?} for metric {metric}")]
    IllegalValue { metric: String, value: String },
}

macro_rules! metric {
    ($(#[$meta:meta])* $name:ident { $($variant:ident = $code:literal => $weight:expr),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn code(self) -> char {
                match self {
                    $($name::$variant => $code),+
                }
            }

            pub fn from_code(code: &str) -> Option<Self> {
                match code {
                    $(c if c.len() == 1 && c.starts_with($code) => Some($name::$variant),)+
                    _ => None,
                }
            }

            #[allow(dead_code)]
            fn raw_weight(self) -> f64 {
                match self {
                    $($name::$variant => $weight),+
                }
            }
        }
    };
}

metric!(AttackVector {
    Network = 'N' => 0.85,
    Adjacent = 'A' => 0.62,
    Local = 'L' => 0.55,
    Physical = 'P' => 0.2,
});
metric!(AttackComplexity { Low = 'L' => 0.77, High = 'H' => 0.44 });
metric!(
    /// Weights here are for unchanged scope; see [`PrivilegesRequired::weight`].
    PrivilegesRequired { None = 'N' => 0.85, Low = 'L' => 0.62, High = 'H' => 0.27 }
);
metric!(UserInteraction { None = 'N' => 0.85, Required = 'R' => 0.62 });
metric!(Scope { Unchanged = 'U' => 1.0, Changed = 'C' => 1.0 });
metric!(Impact { High = 'H' => 0.56, Low = 'L' => 0.22, None = 'N' => 0.0 });
metric!(ExploitMaturity {
    NotDefined = 'X' => 1.0,
    High = 'H' => 1.0,
    Functional = 'F' => 0.97,
    ProofOfConcept = 'P' => 0.94,
    Unproven = 'U' => 0.91,
});
metric!(RemediationLevel {
    NotDefined = 'X' => 1.0,
    Unavailable = 'U' => 1.0,
    Workaround = 'W' => 0.97,
    TemporaryFix = 'T' => 0.96,
    OfficialFix = 'O' => 0.95,
});
metric!(ReportConfidence {
    NotDefined = 'X' => 1.0,
    Confirmed = 'C' => 1.0,
    Reasonable = 'R' => 0.96,
    Unknown = 'U' => 0.92,
});
metric!(Requirement { NotDefined = 'X' => 1.0, High = 'H' => 1.5, Medium = 'M' => 1.0, Low = 'L' => 0.5 });

impl AttackVector {
    pub fn weight(self) -> f64 {
        self.raw_weight()
    }
}

impl AttackComplexity {
    pub fn weight(self) -> f64 {
        self.raw_weight()
    }
}

impl PrivilegesRequired {
    pub fn weight(self, scope: Scope) -> f64 {
        match (self, scope) {
            (PrivilegesRequired::Low, Scope::Changed) => 0.68,
            (PrivilegesRequired::High, Scope::Changed) => 0.5,
            _ => self.raw_weight(),
        }
    }
}

impl UserInteraction {
    pub fn weight(self) -> f64 {
        self.raw_weight()
    }
}

impl Impact {
    pub fn weight(self) -> f64 {
        self.raw_weight()
    }
}

impl ExploitMaturity {
    pub fn weight(self) -> f64 {
        self.raw_weight()
    }
}

impl RemediationLevel {
    pub fn weight(self) -> f64 {
        self.raw_weight()
    }
}

impl ReportConfidence {
    pub fn weight(self) -> f64 {
        self.raw_weight()
    }
}

impl Requirement {
    pub fn weight(self) -> f64 {
        self.raw_weight()
    }
}

/// A parsed vector. Modified metrics are `None` when not defined, in which
/// case the corresponding base metric applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CvssVector {
    pub av: AttackVector,
    pub ac: AttackComplexity,
    pub pr: PrivilegesRequired,
    pub ui: UserInteraction,
    pub s: Scope,
    pub c: Impact,
    pub i: Impact,
    pub a: Impact,
    pub e: ExploitMaturity,
    pub rl: RemediationLevel,
    pub rc: ReportConfidence,
    pub cr: Requirement,
    pub ir: Requirement,
    pub ar: Requirement,
    pub mav: Option<AttackVector>,
    pub mac: Option<AttackComplexity>,
    pub mpr: Option<PrivilegesRequired>,
    pub mui: Option<UserInteraction>,
    pub ms: Option<Scope>,
    pub mc: Option<Impact>,
    pub mi: Option<Impact>,
    pub ma: Option<Impact>,
}

impl CvssVector {
    /// A base-only vector.
    #[allow(clippy::too_many_arguments)]
    pub fn base(
        av: AttackVector,
        ac: AttackComplexity,
        pr: PrivilegesRequired,
        ui: UserInteraction,
        s: Scope,
        c: Impact,
        i: Impact,
        a: Impact,
    ) -> Self {
        Self {
            av,
            ac,
            pr,
            ui,
            s,
            c,
            i,
            a,
            e: ExploitMaturity::NotDefined,
            rl: RemediationLevel::NotDefined,
            rc: ReportConfidence::NotDefined,
            cr: Requirement::NotDefined,
            ir: Requirement::NotDefined,
            ar: Requirement::NotDefined,
            mav: None,
            mac: None,
            mpr: None,
            mui: None,
            ms: None,
            mc: None,
            mi: None,
            ma: None,
        }
    }
}

const KEYS: [&str; 22] = [
    "AV", "AC", "PR", "UI", "S", "C", "I", "A", "E", "RL", "RC", "CR", "IR", "AR", "MAV", "MAC",
    "MPR", "MUI", "MS", "MC", "MI", "MA",
];
const BASE_KEYS: usize = 8;

fn required<T>(metric: &str, value: &str, parsed: Option<T>) -> Result<T, CvssError> {
    parsed.ok_or_else(|| CvssError::IllegalValue {
        metric: metric.to_string(),
        value: value.to_string(),
    })
}

fn modified<T>(
    metric: &str,
    value: Option<&str>,
    parse: fn(&str) -> Option<T>,
) -> Result<Option<T>, CvssError> {
    match value {
        None | Some("X") => Ok(None),
        Some(v) => required(metric, v, parse(v)).map(Some),
    }
}

fn optional<T>(
    metric: &str,
    value: Option<&str>,
    parse: fn(&str) -> Option<T>,
    default: T,
) -> Result<T, CvssError> {
    match value {
        None => Ok(default),
        Some(v) => required(metric, v, parse(v)),
    }
}

/// Parses `CVSS:3.0/AV:_/AC:_/...`. Metrics after the prefix may come in any order.
pub fn parse_vector(s: &str) -> Result<CvssVector, CvssError> {
    let body = s
        .strip_prefix(PREFIX)
        .ok_or_else(|| CvssError::MalformedVector("expected CVSS:3.0/ prefix".to_string()))?;
    let mut values: [Option<&str>; 22] = [None; 22];
    for part in body.split('/') {
        let (key, value) = part.split_once(':').ok_or_else(|| {
            CvssError::MalformedVector(alloc::format!("component {part:?} is not KEY:VALUE"))
        })?;
        let slot = KEYS
            .iter()
            .position(|k| *k == key)
            .ok_or_else(|| CvssError::MalformedVector(alloc::format!("unknown metric {key:?}")))?;
        if values[slot].replace(value).is_some() {
            return Err(CvssError::MalformedVector(alloc::format!(
                "metric {key} given twice"
            )));
        }
    }
    for (key, value) in KEYS.iter().zip(values).take(BASE_KEYS) {
        if value.is_none() {
            return Err(CvssError::MissingBaseMetric(key));
        }
    }
    let base = |i: usize| values[i].expect("checked above");
    Ok(CvssVector {
        av: required("AV", base(0), AttackVector::from_code(base(0)))?,
        ac: required("AC", base(1), AttackComplexity::from_code(base(1)))?,
        pr: required("PR", base(2), PrivilegesRequired::from_code(base(2)))?,
        ui: required("UI", base(3), UserInteraction::from_code(base(3)))?,
        s: required("S", base(4), Scope::from_code(base(4)))?,
        c: required("C", base(5), Impact::from_code(base(5)))?,
        i: required("I", base(6), Impact::from_code(base(6)))?,
        a: required("A", base(7), Impact::from_code(base(7)))?,
        e: optional(
            "E",
            values[8],
            ExploitMaturity::from_code,
            ExploitMaturity::NotDefined,
        )?,
        rl: optional(
            "RL",
            values[9],
            RemediationLevel::from_code,
            RemediationLevel::NotDefined,
        )?,
        rc: optional(
            "RC",
            values[10],
            ReportConfidence::from_code,
            ReportConfidence::NotDefined,
        )?,
        cr: optional(
            "CR",
            values[11],
            Requirement::from_code,
            Requirement::NotDefined,
        )?,
        ir: optional(
            "IR",
            values[12],
            Requirement::from_code,
            Requirement::NotDefined,
        )?,
        ar: optional(
            "AR",
            values[13],
            Requirement::from_code,
            Requirement::NotDefined,
        )?,
        mav: modified("MAV", values[14], AttackVector::from_code)?,
        mac: modified("MAC", values[15], AttackComplexity::from_code)?,
        mpr: modified("MPR", values[16], PrivilegesRequired::from_code)?,
        mui: modified("MUI", values[17], UserInteraction::from_code)?,
        ms: modified("MS", values[18], Scope::from_code)?,
        mc: modified("MC", values[19], Impact::from_code)?,
        mi: modified("MI", values[20], Impact::from_code)?,
        ma: modified("MA", values[21], Impact::from_code)?,
    })
}

impl fmt::Display for CvssVector {
    /// Canonical form: fixed metric order, not-defined (`X`) metrics omitted.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let codes: [Option<char>; 22] = [
            Some(self.av.code()),
            Some(self.ac.code()),
            Some(self.pr.code()),
            Some(self.ui.code()),
            Some(self.s.code()),
            Some(self.c.code()),
            Some(self.i.code()),
            Some(self.a.code()),
            Some(self.e.code()),
            Some(self.rl.code()),
            Some(self.rc.code()),
            Some(self.cr.code()),
            Some(self.ir.code()),
            Some(self.ar.code()),
            self.mav.map(AttackVector::code),
            self.mac.map(AttackComplexity::code),
            self.mpr.map(PrivilegesRequired::code),
            self.mui.map(UserInteraction::code),
            self.ms.map(Scope::code),
            self.mc.map(Impact::code),
            self.mi.map(Impact::code),
            self.ma.map(Impact::code),
        ];
        f.write_str(PREFIX.trim_end_matches('/'))?;
        for (key, code) in KEYS.iter().zip(codes) {
            match code {
                Some('X') | None => {}
                Some(code) => write!(f, "/{key}:{code}")?,
            }
        }
        Ok(())
    }
}

impl FromStr for CvssVector {
    type Err = CvssError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_vector(s)
    }
}

impl Serialize for CvssVector {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CvssVector {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_vector(&text).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Severity {
    None,
    Low,
    Medium,
    High,
    Critical,
}

impl Severity {
    pub fn of(score: f64) -> Self {
        match tenths(score) {
            0 => Severity::None,
            1..=39 => Severity::Low,
            40..=69 => Severity::Medium,
            70..=89 => Severity::High,
            _ => Severity::Critical,
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Base, temporal and environmental scores; `severity` rates the base score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvssScore {
    pub base: f64,
    pub temporal: f64,
    pub environmental: f64,
    pub severity: Severity,
}

fn tenths(score: f64) -> i64 {
    libm::round(score * 10.0) as i64
}

/// Smallest one-decimal value that is at least `x`. Works on `x * 100000`
/// as an integer so that float noise such as `4.000000000001` rounds to 4.0.
pub fn roundup(x: f64) -> f64 {
    let scaled = libm::round(x * 100_000.0) as i64;
    if scaled % 10_000 == 0 {
        scaled as f64 / 100_000.0
    } else {
        (scaled.div_euclid(10_000) + 1) as f64 / 10.0
    }
}

fn impact_subscore(scope: Scope, isc_base: f64) -> f64 {
    match scope {
        Scope::Unchanged => 6.42 * isc_base,
        Scope::Changed => 7.52 * (isc_base - 0.029) - 3.25 * libm::pow(isc_base - 0.02, 15.0),
    }
}

fn combine(scope: Scope, impact: f64, exploitability: f64) -> f64 {
    if impact <= 0.0 {
        return 0.0;
    }
    match scope {
        Scope::Unchanged => roundup((impact + exploitability).min(10.0)),
        Scope::Changed => roundup((1.08 * (impact + exploitability)).min(10.0)),
    }
}

fn temporal_factor(v: &CvssVector) -> f64 {
    v.e.weight() * v.rl.weight() * v.rc.weight()
}

pub fn base_score(v: &CvssVector) -> f64 {
    let isc_base = 1.0 - (1.0 - v.c.weight()) * (1.0 - v.i.weight()) * (1.0 - v.a.weight());
    let impact = impact_subscore(v.s, isc_base);
    let exploitability = 8.22 * v.av.weight() * v.ac.weight() * v.pr.weight(v.s) * v.ui.weight();
    combine(v.s, impact, exploitability)
}

pub fn temporal_score(v: &CvssVector) -> f64 {
    roundup(base_score(v) * temporal_factor(v))
}

pub fn environmental_score(v: &CvssVector) -> f64 {
    let scope = v.ms.unwrap_or(v.s);
    let (mc, mi, ma) = (
        v.mc.unwrap_or(v.c),
        v.mi.unwrap_or(v.i),
        v.ma.unwrap_or(v.a),
    );
    let isc_modified = (1.0
        - (1.0 - mc.weight() * v.cr.weight())
            * (1.0 - mi.weight() * v.ir.weight())
            * (1.0 - ma.weight() * v.ar.weight()))
    .min(0.915);
    let impact = impact_subscore(scope, isc_modified);
    let exploitability = 8.22
        * v.mav.unwrap_or(v.av).weight()
        * v.mac.unwrap_or(v.ac).weight()
        * v.mpr.unwrap_or(v.pr).weight(scope)
        * v.mui.unwrap_or(v.ui).weight();
    let adjusted = combine(scope, impact, exploitability);
    if adjusted == 0.0 {
        return 0.0;
    }
    roundup(adjusted * temporal_factor(v))
}

pub fn score(v: &CvssVector) -> CvssScore {
    let base = base_score(v);
    CvssScore {
        base,
        temporal: temporal_score(v),
        environmental: environmental_score(v),
        severity: Severity::of(base),
    }
}

/// Every base-only vector, in a fixed order.
pub fn all_base_vectors() -> Vec<CvssVector> {
    let mut out = Vec::new();
    for &av in AttackVector::ALL {
        for &ac in AttackComplexity::ALL {
            for &pr in PrivilegesRequired::ALL {
                for &ui in UserInteraction::ALL {
                    for &s in Scope::ALL {
                        for &c in Impact::ALL {
                            for &i in Impact::ALL {
                                for &a in Impact::ALL {
                                    out.push(CvssVector::base(av, ac, pr, ui, s, c, i, a));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attack_vector_weights() {
        assert_eq!(AttackVector::Network.weight(), 0.85);
        assert_eq!(AttackVector::Adjacent.weight(), 0.62);
        assert_eq!(AttackVector::Local.weight(), 0.55);
        assert_eq!(AttackVector::Physical.weight(), 0.2);
    }

    #[test]
    fn roundup_examples() {
        assert_eq!(roundup(4.00), 4.0);
        assert_eq!(roundup(4.02), 4.1);
        assert_eq!(roundup(4.000_000_000_1), 4.0);
        assert_eq!(roundup(0.0), 0.0);
        assert_eq!(roundup(9.99), 10.0);
    }

    #[test]
    fn critical_base_vector() {
        let v = parse_vector("CVSS:3.0/AV:N/AC:L/PR:N/UI:N/S:U/C:H/I:H/A:H").unwrap();
        assert_eq!(
            v.to_string(),
            "CVSS:3.0/AV:N/AC:L/PR:N/UI:N/S:U/C:H/I:H/A:H"
        );
        let s = score(&v);
        assert_eq!((s.base, s.temporal, s.environmental), (9.8, 9.8, 9.8));
        assert_eq!(s.severity, Severity::Critical);
    }

    #[test]
    fn temporal_metrics_from_oracle() {
        let v = parse_vector("CVSS:3.0/AV:N/AC:L/PR:N/UI:N/S:U/C:H/I:H/A:H/E:U/RL:O/RC:U").unwrap();
        assert_eq!(temporal_score(&v), 7.8);
    }

    #[test]
    fn zero_impact_for_all_exploitability_combinations() {
        let mut cases = 0;
        for v in all_base_vectors() {
            if (v.c, v.i, v.a) == (Impact::None, Impact::None, Impact::None) {
                assert_eq!(base_score(&v), 0.0, "{v}");
                cases += 1;
            }
        }
        assert_eq!(cases, 4 * 2 * 3 * 2 * 2);
    }

    #[test]
    fn parse_errors() {
        assert_eq!(
            parse_vector("CVSS:3.0/AV:N/AC:L/PR:N/UI:N/S:U/C:H/I:H"),
            Err(CvssError::MissingBaseMetric("A"))
        );
        assert!(matches!(
            parse_vector("CVSS:3.0/AV:Q/AC:L/PR:N/UI:N/S:U/C:H/I:H/A:H"),
            Err(CvssError::IllegalValue { .. })
        ));
        assert!(matches!(
            parse_vector("CVSS:3.1/AV:N/AC:L/PR:N/UI:N/S:U/C:H/I:H/A:H"),
            Err(CvssError::MalformedVector(_))
        ));
        assert!(matches!(
            parse_vector("CVSS:3.0/AV:N/AC:L/PR:N/UI:N/S:U/C:H/I:H/A:H/ZZ:X"),
            Err(CvssError::MalformedVector(_))
        ));
        assert!(matches!(
            parse_vector("CVSS:3.0/AV:N/AV:N/AC:L/PR:N/UI:N/S:U/C:H/I:H/A:H"),
            Err(CvssError::MalformedVector(_))
        ));
        assert!(matches!(
            parse_vector("CVSS:3.0/AV:N/AC:L/PR:N/UI:N/S:U/C:H/I:H/A:X"),
            Err(CvssError::IllegalValue { .. })
        ));
    }

    #[test]
    fn order_insensitive_and_x_dropped() {
        let a = parse_vector("CVSS:3.0/A:H/I:H/C:H/S:U/UI:N/PR:N/AC:L/AV:N/E:X/MAV:X").unwrap();
        let b = parse_vector("CVSS:3.0/AV:N/AC:L/PR:N/UI:N/S:U/C:H/I:H/A:H").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_string(), b.to_string());
    }

    #[test]
    fn severity_bands() {
        assert_eq!(Severity::of(0.0), Severity::None);
        assert_eq!(Severity::of(0.1), Severity::Low);
        assert_eq!(Severity::of(3.9), Severity::Low);
        assert_eq!(Severity::of(4.0), Severity::Medium);
        assert_eq!(Severity::of(6.9), Severity::Medium);
        assert_eq!(Severity::of(7.0), Severity::High);
        assert_eq!(Severity::of(8.9), Severity::High);
        assert_eq!(Severity::of(9.0), Severity::Critical);
        assert_eq!(Severity::of(10.0), Severity::Critical);
    }
}
