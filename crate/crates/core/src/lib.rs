//! Algorithmic core of the Dynaswap secure data-sharing gateway.
//!
//! Everything in this crate is pure: randomness is passed in as a
//! [`rand_core::CryptoRngCore`], time as Unix seconds, and nothing touches
//! the filesystem or network. The crate is `no_std` and only needs `alloc`.
//!
//! Modules:
//!
//! - [`hierarchy`]: role and data DAGs, user assignments, reachability queries.
//! - [`dlkm`]: versioned node keys, public edge tokens for downward-only key
//!   derivation, per-user key wraps, and rekeying on hierarchy changes.
//! - [`biocap`]: BioCapsule fusion, enrollment, one-step login, reference
//!   subject reissue, and synthetic feature generation.
//! - [`provenance`]: hash-linked, Ed25519-signed life-cycle records and
//!   MAC-then-decrypt transfer envelopes.
//! - [`recordstore`]: encrypted clinical records, cohorts, aggregate reports
//!   and Safe-Harbor de-identified export.
//! - [`cvss`]: CVSS v3.0 vector parsing and scoring.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod biocap;
pub mod crypto;
pub mod cvss;
pub mod date;
pub mod dlkm;
pub mod hierarchy;
mod ids;
pub mod provenance;
pub mod recordstore;

pub use crypto::sha256;
pub use ids::{NodeId, UserId};
