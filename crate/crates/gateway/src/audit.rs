//! Append-only audit trail.
//!
//! One JSON line per request outcome in `audit/YYYY-MM-DD.jsonl`. Each line
//! carries an HMAC over its fields and the previous line's MAC, so a day file
//! is a keyed hash chain. `audit/heads.json` pins the entry count and last
//! MAC of every day (itself MACed) so truncation and deleted days show up too.
//! Nothing in the service can rewrite or delete an entry.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use dynaswap_core::crypto::{hmac_sha256, hmac_sha256_verify, length_prefixed};
use dynaswap_core::date::CivilDate;
use serde::{Deserialize, Serialize};
use subtle::ConstantTimeEq;

use crate::codec::hex32;
use crate::fsio;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Allow,
    Deny,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Allow => "allow",
            Outcome::Deny => "deny",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub seq: u64,
    pub timestamp: u64,
    pub actor: String,
    pub role: String,
    pub endpoint: String,
    pub outcome: Outcome,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AuditLine {
    #[serde(flatten)]
    entry: AuditEntry,
    #[serde(with = "hex32")]
    prev: [u8; 32],
    #[serde(with = "hex32")]
    mac: [u8; 32],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct DayHead {
    count: u64,
    #[serde(with = "hex32")]
    last_mac: [u8; 32],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeadsFile {
    days: BTreeMap<String, DayHead>,
    #[serde(with = "hex32")]
    mac: [u8; 32],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuditFailureReason {
    Malformed,
    Sequence,
    Link,
    Mac,
    /// Fewer or more entries than the pinned head, or a different last MAC.
    HeadMismatch,
    /// A day file exists without a head, or a head without its file.
    Unlisted,
    /// `heads.json` itself fails its MAC.
    Heads,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditFailure {
    pub day: String,
    /// 1-based line number, 0 when the failure concerns the whole day.
    pub line: u64,
    pub reason: AuditFailureReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub days: usize,
    pub entries: u64,
    pub failures: Vec<AuditFailure>,
}

impl AuditReport {
    pub fn is_intact(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AuditError {
    #[error("audit io: {0}")]
    Io(#[from] io::Error),
    #[error("audit heads file failed its integrity check")]
    Heads,
}

pub struct AuditLog {
    dir: PathBuf,
    key: [u8; 32],
    heads: BTreeMap<String, DayHead>,
}

pub fn day_of(timestamp: u64) -> String {
    CivilDate::from_unix_seconds(timestamp).to_string()
}

fn entry_mac(key: &[u8; 32], day: &str, entry: &AuditEntry, prev: &[u8; 32]) -> [u8; 32] {
    let message = length_prefixed(&[
        b"audit-entry",
        day.as_bytes(),
        &entry.seq.to_be_bytes(),
        &entry.timestamp.to_be_bytes(),
        entry.actor.as_bytes(),
        entry.role.as_bytes(),
        entry.endpoint.as_bytes(),
        entry.outcome.as_str().as_bytes(),
        entry.detail.as_bytes(),
        prev,
    ]);
    hmac_sha256(key, &message)
}

fn heads_message(days: &BTreeMap<String, DayHead>) -> Vec<u8> {
    let mut parts: Vec<Vec<u8>> = vec![b"audit-heads".to_vec()];
    for (day, head) in days {
        parts.push(day.as_bytes().to_vec());
        parts.push(head.count.to_be_bytes().to_vec());
        parts.push(head.last_mac.to_vec());
    }
    let refs: Vec<&[u8]> = parts.iter().map(Vec::as_slice).collect();
    length_prefixed(&refs)
}

impl AuditLog {
    pub fn open(dir: &Path, key: [u8; 32]) -> Result<Self, AuditError> {
        let heads = match fsio::read_optional(&dir.join("heads.json"))? {
            None => BTreeMap::new(),
            Some(bytes) => {
                let file: HeadsFile =
                    serde_json::from_slice(&bytes).map_err(|_| AuditError::Heads)?;
                if !hmac_sha256_verify(&key, &heads_message(&file.days), &file.mac) {
                    return Err(AuditError::Heads);
                }
                file.days
            }
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            key,
            heads,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn day_path(&self, day: &str) -> PathBuf {
        self.dir.join(format!("{day}.jsonl"))
    }

    pub fn total_entries(&self) -> u64 {
        self.heads.values().map(|h| h.count).sum()
    }

    pub fn append(
        &mut self,
        timestamp: u64,
        actor: &str,
        role: &str,
        endpoint: &str,
        outcome: Outcome,
        detail: &str,
    ) -> Result<AuditEntry, AuditError> {
        let day = day_of(timestamp);
        let head = self.heads.get(&day).copied().unwrap_or(DayHead {
            count: 0,
            last_mac: [0; 32],
        });
        let entry = AuditEntry {
            seq: head.count,
            timestamp,
            actor: actor.to_string(),
            role: role.to_string(),
            endpoint: endpoint.to_string(),
            outcome,
            detail: detail.to_string(),
        };
        let mac = entry_mac(&self.key, &day, &entry, &head.last_mac);
        let line = AuditLine {
            entry: entry.clone(),
            prev: head.last_mac,
            mac,
        };
        fsio::append_line(
            &self.day_path(&day),
            &serde_json::to_string(&line).map_err(io::Error::other)?,
        )?;
        self.heads.insert(
            day,
            DayHead {
                count: head.count + 1,
                last_mac: mac,
            },
        );
        self.write_heads()?;
        Ok(entry)
    }

    fn write_heads(&self) -> io::Result<()> {
        let mac = hmac_sha256(&self.key, &heads_message(&self.heads));
        fsio::write_json(
            &self.dir.join("heads.json"),
            &HeadsFile {
                days: self.heads.clone(),
                mac,
            },
        )
    }

    /// Re-reads every day file from disk and checks it against the pinned heads.
    pub fn verify(&self) -> Result<AuditReport, AuditError> {
        let mut failures = Vec::new();
        let mut entries = 0;
        match fsio::read_optional(&self.dir.join("heads.json"))? {
            Some(bytes) => {
                let ok = serde_json::from_slice::<HeadsFile>(&bytes).is_ok_and(|f| {
                    f.days == self.heads
                        && hmac_sha256_verify(&self.key, &heads_message(&f.days), &f.mac)
                });
                if !ok {
                    failures.push(AuditFailure {
                        day: String::new(),
                        line: 0,
                        reason: AuditFailureReason::Heads,
                    });
                }
            }
            None if !self.heads.is_empty() => failures.push(AuditFailure {
                day: String::new(),
                line: 0,
                reason: AuditFailureReason::Heads,
            }),
            None => {}
        }

        let mut on_disk = Vec::new();
        if self.dir.exists() {
            for item in fs::read_dir(&self.dir)? {
                let name = item?.file_name().to_string_lossy().into_owned();
                if let Some(day) = name.strip_suffix(".jsonl") {
                    on_disk.push(day.to_string());
                }
            }
        }
        on_disk.sort();
        for day in &on_disk {
            if !self.heads.contains_key(day) {
                failures.push(AuditFailure {
                    day: day.clone(),
                    line: 0,
                    reason: AuditFailureReason::Unlisted,
                });
            }
        }
        for (day, head) in &self.heads {
            let Some(bytes) = fsio::read_optional(&self.day_path(day))? else {
                failures.push(AuditFailure {
                    day: day.clone(),
                    line: 0,
                    reason: AuditFailureReason::Unlisted,
                });
                continue;
            };
            let (count, last, failure) = self.verify_day(day, &bytes);
            entries += count;
            if let Some(failure) = failure {
                failures.push(failure);
            } else if count != head.count || last != head.last_mac {
                failures.push(AuditFailure {
                    day: day.clone(),
                    line: 0,
                    reason: AuditFailureReason::HeadMismatch,
                });
            }
        }
        Ok(AuditReport {
            days: self.heads.len(),
            entries,
            failures,
        })
    }

    /// Walks one day file; stops at the first broken line.
    fn verify_day(&self, day: &str, bytes: &[u8]) -> (u64, [u8; 32], Option<AuditFailure>) {
        let mut prev = [0u8; 32];
        let mut count = 0u64;
        let fail = |line: u64, reason| AuditFailure {
            day: day.to_string(),
            line,
            reason,
        };
        for (i, raw) in bytes
            .split(|b| *b == b'\n')
            .filter(|l| !l.is_empty())
            .enumerate()
        {
            let n = i as u64 + 1;
            let Ok(line) = serde_json::from_slice::<AuditLine>(raw) else {
                return (count, prev, Some(fail(n, AuditFailureReason::Malformed)));
            };
            if line.entry.seq != i as u64 {
                return (count, prev, Some(fail(n, AuditFailureReason::Sequence)));
            }
            if line.prev != prev {
                return (count, prev, Some(fail(n, AuditFailureReason::Link)));
            }
            let expected = entry_mac(&self.key, day, &line.entry, &line.prev);
            if !bool::from(expected.ct_eq(&line.mac)) || day_of(line.entry.timestamp) != day {
                return (count, prev, Some(fail(n, AuditFailureReason::Mac)));
            }
            prev = line.mac;
            count += 1;
        }
        (count, prev, None)
    }

    /// Entries of one day as stored on disk, without verification.
    pub fn read_day(&self, day: &str) -> Result<Vec<AuditEntry>, AuditError> {
        let bytes = fsio::read_optional(&self.day_path(day))?.unwrap_or_default();
        Ok(bytes
            .split(|b| *b == b'\n')
            .filter(|l| !l.is_empty())
            .filter_map(|l| serde_json::from_slice::<AuditLine>(l).ok())
            .map(|l| l.entry)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const T0: u64 = 1_767_225_600;

    fn log_with(n: u64) -> (tempfile::TempDir, AuditLog) {
        let dir = tempfile::tempdir().unwrap();
        let mut log = AuditLog::open(dir.path(), [7; 32]).unwrap();
        for i in 0..n {
            let outcome = if i % 3 == 0 {
                Outcome::Deny
            } else {
                Outcome::Allow
            };
            log.append(T0 + i, &format!("u{i}"), "RN", "record_get", outcome, "x")
                .unwrap();
        }
        (dir, log)
    }

    #[test]
    fn fresh_log_verifies() {
        let (_dir, log) = log_with(5);
        let report = log.verify().unwrap();
        assert!(report.is_intact(), "{report:?}");
        assert_eq!(report.entries, 5);
        let reopened = AuditLog::open(log.dir(), [7; 32]).unwrap();
        assert!(reopened.verify().unwrap().is_intact());
    }

    #[test]
    fn edited_actor_is_caught_at_its_line() {
        let (_dir, log) = log_with(5);
        let path = log.day_path(&day_of(T0));
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"actor\":\"u2\"", "\"actor\":\"u4\"");
        fs::write(&path, text).unwrap();
        let report = log.verify().unwrap();
        assert_eq!(report.failures[0].line, 3);
        assert_eq!(report.failures[0].reason, AuditFailureReason::Mac);
    }

    #[test]
    fn truncation_and_deletion_are_caught() {
        let (_dir, log) = log_with(4);
        let path = log.day_path(&day_of(T0));
        let text = fs::read_to_string(&path).unwrap();
        let kept: Vec<&str> = text.lines().take(3).collect();
        fs::write(&path, kept.join("\n") + "\n").unwrap();
        assert_eq!(
            log.verify().unwrap().failures[0].reason,
            AuditFailureReason::HeadMismatch
        );
        fs::remove_file(&path).unwrap();
        assert_eq!(
            log.verify().unwrap().failures[0].reason,
            AuditFailureReason::Unlisted
        );
    }

    #[test]
    fn forged_heads_refuse_to_open() {
        let (_dir, log) = log_with(2);
        let path = log.dir().join("heads.json");
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"count\": 2", "\"count\": 1");
        fs::write(&path, text).unwrap();
        assert!(matches!(
            AuditLog::open(log.dir(), [7; 32]),
            Err(AuditError::Heads)
        ));
    }

    #[test]
    fn wrong_key_fails_every_day() {
        let (_dir, log) = log_with(3);
        let other = AuditLog {
            dir: log.dir.clone(),
            key: [8; 32],
            heads: log.heads.clone(),
        };
        assert!(!other.verify().unwrap().is_intact());
    }
}
