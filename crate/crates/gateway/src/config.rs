//! Gateway configuration: a TOML file plus the store master key from the environment.

use std::fmt;
use std::path::{Path, PathBuf};

use dynaswap_core::biocap::BiocapConfig;
use serde::{Deserialize, Serialize};
use zeroize::Zeroizing;

use crate::codec::parse_hex32;

pub const MASTER_KEY_ENV: &str = "DYNASWAP_MASTER_KEY";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{MASTER_KEY_ENV} is not set")]
    MissingMasterKey,
    #[error("{MASTER_KEY_ENV} must be 64 hex digits (32 bytes)")]
    BadMasterKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Directory holding every persisted artifact.
    pub store: PathBuf,
    /// Role whose sessions may call the admin endpoints.
    pub admin_role: String,
    pub biocap: BiocapSection,
    pub server: ServerSection,
    pub audit: AuditSection,
    pub rate_limit: RateLimitSection,
    pub faults: FaultSection,
    /// Seed for the gateway's RNG; fresh entropy when absent.
    pub rng_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiocapSection {
    pub dim: usize,
    pub threshold: f64,
    pub session_ttl_secs: u64,
    /// Noise level of the simulated capture device.
    pub capture_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub listen: String,
    pub max_request_bytes: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditSection {
    /// Append a provenance record for every successful read.
    pub audit_reads: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateLimitSection {
    pub capacity: u32,
    pub refill_per_sec: u32,
    pub max_clients: usize,
}

/// Deliberate weaknesses for evaluation runs. Never enable in production.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultSection {
    pub skip_transfer_mac: bool,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            store: PathBuf::from("dynaswap-store"),
            admin_role: "Admin".into(),
            biocap: BiocapSection::default(),
            server: ServerSection::default(),
            audit: AuditSection::default(),
            rate_limit: RateLimitSection::default(),
            faults: FaultSection::default(),
            rng_seed: None,
        }
    }
}

impl Default for BiocapSection {
    fn default() -> Self {
        let core = BiocapConfig::default();
        Self {
            dim: core.dim,
            threshold: core.threshold,
            session_ttl_secs: core.session_ttl_secs,
            capture_sigma: 0.1,
        }
    }
}

impl Default for ServerSection {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:7878".into(),
            max_request_bytes: 1 << 20,
        }
    }
}

impl Default for RateLimitSection {
    fn default() -> Self {
        Self {
            capacity: 50,
            refill_per_sec: 20,
            max_clients: 4096,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config: Config = toml::from_str(&text)?;
        if config.store.is_relative() {
            if let Some(dir) = path.parent() {
                config.store = dir.join(&config.store);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let b = &self.biocap;
        if b.dim == 0 {
            return Err(ConfigError::Invalid("biocap.dim must be positive".into()));
        }
        if !(b.threshold > -1.0 && b.threshold <= 1.0) {
            return Err(ConfigError::Invalid(
                "biocap.threshold must lie in (-1, 1]".into(),
            ));
        }
        if b.session_ttl_secs == 0 {
            return Err(ConfigError::Invalid(
                "biocap.session_ttl_secs must be positive".into(),
            ));
        }
        if !(b.capture_sigma >= 0.0 && b.capture_sigma.is_finite()) {
            return Err(ConfigError::Invalid(
                "biocap.capture_sigma must be finite and >= 0".into(),
            ));
        }
        if self.rate_limit.capacity == 0 || self.rate_limit.max_clients == 0 {
            return Err(ConfigError::Invalid(
                "rate_limit.capacity and max_clients must be positive".into(),
            ));
        }
        if self.admin_role.is_empty() {
            return Err(ConfigError::Invalid("admin_role must not be empty".into()));
        }
        Ok(())
    }

    pub fn biocap_config(&self) -> BiocapConfig {
        BiocapConfig {
            dim: self.biocap.dim,
            threshold: self.biocap.threshold,
            session_ttl_secs: self.biocap.session_ttl_secs,
        }
    }
}

/// The 32-byte store master key. Every at-rest secret is sealed under a key derived from it.
#[derive(Clone)]
pub struct MasterKey(Zeroizing<[u8; 32]>);

impl MasterKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(Zeroizing::new(bytes))
    }

    pub fn from_hex(text: &str) -> Result<Self, ConfigError> {
        parse_hex32(text)
            .map(Self::from_bytes)
            .ok_or(ConfigError::BadMasterKey)
    }

    pub fn from_env() -> Result<Self, ConfigError> {
        let text = std::env::var(MASTER_KEY_ENV).map_err(|_| ConfigError::MissingMasterKey)?;
        Self::from_hex(&text)
    }

    /// Purpose-bound subkey.
    pub fn subkey(&self, purpose: &str, context: &[&[u8]]) -> [u8; 32] {
        let mut info: Vec<&[u8]> = vec![b"dynaswap-master", purpose.as_bytes()];
        info.extend_from_slice(context);
        dynaswap_core::crypto::hkdf32(self.0.as_slice(), &info)
    }
}

impl fmt::Debug for MasterKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("MasterKey(..)")
    }
}
