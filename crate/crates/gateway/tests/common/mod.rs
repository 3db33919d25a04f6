#![allow(dead_code)]

use dynaswap_gateway::fixture::{self, FixtureSummary};
use dynaswap_gateway::scenario::SCENARIO_EPOCH;
use dynaswap_gateway::{Clock, Config, Gateway, MasterKey};
use tempfile::TempDir;

pub const MASTER: [u8; 32] = [0x42; 32];

pub fn config(dir: &TempDir) -> Config {
    Config {
        store: dir.path().join("store"),
        rng_seed: Some(7),
        ..Config::default()
    }
}

pub fn open(config: Config) -> Gateway {
    Gateway::open(
        config,
        MasterKey::from_bytes(MASTER),
        Clock::Manual(SCENARIO_EPOCH),
    )
    .unwrap()
}

/// A fresh store seeded with a small fixture.
pub fn seeded(patients: usize) -> (TempDir, Gateway, FixtureSummary) {
    let dir = tempfile::tempdir().unwrap();
    let mut gw = open(config(&dir));
    let summary = fixture::seed(&mut gw, 11, patients).unwrap();
    (dir, gw, summary)
}

pub fn leaks(text: &str, markers: &[String]) -> Option<String> {
    markers.iter().find(|m| text.contains(m.as_str())).cloned()
}
