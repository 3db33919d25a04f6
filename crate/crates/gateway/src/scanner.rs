//! Regex scan for residual Safe-Harbor identifiers in export documents.

use dynaswap_core::recordstore::{Finding, IdentifierScanner, SafeHarborCategory, DENY_LIST};
use regex::Regex;

use SafeHarborCategory as C;

const PATTERNS: &[(SafeHarborCategory, &str)] = &[
    (C::Name, r"\b(?:Mr|Mrs|Ms|Miss|Dr)\.?\s+[A-Z][a-z]+"),
    (C::Name, r"\b[A-Z][a-z]+,\s+[A-Z][a-z]+\b"),
    (C::Geographic, r"\b\d{5}(?:-\d{4})?\b"),
    (
        C::Geographic,
        r"\b\d+\s+[A-Z][a-z]+\s+(?:St|Street|Ave|Avenue|Rd|Road|Blvd|Boulevard|Ln|Lane|Dr|Drive|Ct|Court|Way)\b",
    ),
    (
        C::Date,
        r"\b(?:1[89]|20)\d{2}-(?:0[1-9]|1[0-2])-(?:0[1-9]|[12]\d|3[01])\b",
    ),
    (C::Date, r"\b\d{1,2}/\d{1,2}/\d{2,4}\b"),
    (
        C::Date,
        r"(?i)\b(?:jan|feb|mar|apr|may|jun|jul|aug|sep|sept|oct|nov|dec)[a-z]*\.?\s+\d{1,2},?\s+\d{4}\b",
    ),
    (
        C::Phone,
        r"(?:\(\d{3}\)\s?|\b\d{3}[-.\s])\d{3}[-.\s]\d{4}\b",
    ),
    (C::Fax, r"(?i)\bfax\b[:\s#]*\+?[\d(]"),
    (C::Email, r"[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}"),
    (C::Ssn, r"\b\d{3}-\d{2}-\d{4}\b"),
    (C::MedicalRecordNumber, r"(?i)\bMRN[-:#\s]*\d{4,}"),
    (
        C::HealthPlanNumber,
        r"(?i)\b(?:HPN|member\s*id|policy\s*(?:no|number))[-:#\s]*[A-Z0-9]{6,}",
    ),
    (C::AccountNumber, r"(?i)\b(?:ACCT|account)[-:#\s]*\d{4,}"),
    (
        C::LicenseNumber,
        r"(?i)\b(?:LIC|license)[-:#\s]*[A-Z0-9]{5,}",
    ),
    (C::LicenseNumber, r"\bDL[-:#]\s*[A-Z0-9]{5,}"),
    (C::VehicleId, r"\b[A-HJ-NPR-Z0-9]{17}\b"),
    (C::VehicleId, r"(?i)\bplate[-:#\s]*[A-Z0-9]{5,8}\b"),
    (C::DeviceId, r"(?i)\b(?:DEV|serial)[-:#\s]*[A-Z0-9]{6,}"),
    (C::Url, r"(?i)\b(?:https?|ftp)://\S+"),
    (C::Url, r"(?i)\bwww\.[a-z0-9-]+\.\S+"),
    (C::IpAddress, r"\b(?:\d{1,3}\.){3}\d{1,3}\b"),
    (C::IpAddress, r"(?i)\b(?:[0-9a-f]{1,4}:){7}[0-9a-f]{1,4}\b"),
    (
        C::Biometric,
        r"(?i)\b(?:BIO|fingerprint|voiceprint|retina)[-:#\s]*[A-Z0-9]{6,}",
    ),
    (
        C::Photo,
        r"(?i)\b[\w-]+\.(?:jpe?g|png|gif|bmp|tiff?|heic)\b",
    ),
    (C::OtherId, r"(?i)\b(?:PAT|EMP|NID)[-:#]\s*[A-Z0-9]{4,}"),
];

/// Content patterns for all 18 categories, plus a structural check that no
/// export field carries a deny-listed name.
pub struct RegexScanner {
    patterns: Vec<(SafeHarborCategory, Regex)>,
    field_names: Regex,
}

impl Default for RegexScanner {
    fn default() -> Self {
        Self::new()
    }
}

impl RegexScanner {
    pub fn new() -> Self {
        let patterns = PATTERNS
            .iter()
            .map(|(category, pattern)| {
                (
                    *category,
                    Regex::new(pattern).expect("built-in pattern compiles"),
                )
            })
            .collect();
        let names: Vec<String> = DENY_LIST
            .iter()
            .flat_map(|(_, names)| names.iter())
            .map(|n| regex::escape(n))
            .collect();
        let field_names = Regex::new(&format!(r#"(?i)<field name="({})""#, names.join("|")))
            .expect("field pattern compiles");
        Self {
            patterns,
            field_names,
        }
    }

    pub fn categories(&self) -> Vec<SafeHarborCategory> {
        let mut out: Vec<_> = self.patterns.iter().map(|(c, _)| *c).collect();
        out.dedup();
        out
    }
}

impl IdentifierScanner for RegexScanner {
    fn scan(&self, text: &str) -> Vec<Finding> {
        let mut findings = Vec::new();
        for caps in self.field_names.captures_iter(text) {
            let name = &caps[1];
            if let Some(category) = dynaswap_core::recordstore::denied_category(name) {
                findings.push(Finding {
                    category,
                    matched: caps[0].to_string(),
                });
            }
        }
        for (category, regex) in &self.patterns {
            findings.extend(regex.find_iter(text).map(|m| Finding {
                category: *category,
                matched: m.as_str().to_string(),
            }));
        }
        findings
    }
}
