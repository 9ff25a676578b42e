#![allow(dead_code)]

use std::path::PathBuf;

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use reveal_core::{Direction, ExchangeRecord, ScenarioConfig};

pub const BUNDLED: [&str; 5] = [
    "direct_link",
    "halfduplex_attack",
    "fullduplex_attack",
    "fullduplex_prefer_uplink",
    "double_fdx",
];

pub fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn bundled(name: &str) -> ScenarioConfig {
    let text = std::fs::read_to_string(scenario_dir().join(format!("{name}.toml"))).unwrap();
    ScenarioConfig::from_toml(&text).unwrap()
}

/// Reseeds a scenario and draws a fresh clock, with SNR jitter on.
pub fn vary(mut c: ScenarioConfig, seed: u64) -> ScenarioConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    c.seed = seed;
    c.clock.skew = rng.gen_range(0.99..1.01);
    c.clock.offset_s = rng.gen_range(0.0..100.0);
    c.channel.snr_jitter_db = 1.0;
    c
}

pub fn digest(lines: &[String]) -> String {
    let mut h = Sha256::new();
    for l in lines {
        h.update(l.as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn golden_path(name: &str) -> PathBuf {
    scenario_dir().join("golden").join(format!("{name}.sha256"))
}

pub fn golden_digest(name: &str) -> Option<String> {
    std::fs::read_to_string(golden_path(name)).ok().map(|s| s.trim().to_string())
}

/// Exact rank of the observation matrix over the rationals.
pub fn rational_rank(records: &[ExchangeRecord]) -> usize {
    let origin = records[0].base_stamp.nanos() as i128;
    let mut m: Vec<Vec<Ratio<i128>>> = records
        .iter()
        .map(|r| {
            let t = r.base_stamp.nanos() as i128 - origin;
            let row = match r.direction {
                Direction::Downlink => [t, 1, 0, 1],
                Direction::Uplink => [t, 0, -1, 1],
            };
            row.iter().map(|&x| Ratio::from_integer(x)).collect()
        })
        .collect();
    let zero = Ratio::from_integer(0);
    let mut rank = 0;
    for col in 0..4 {
        let Some(p) = (rank..m.len()).find(|&i| m[i][col] != zero) else {
            continue;
        };
        m.swap(rank, p);
        for i in 0..m.len() {
            if i != rank && m[i][col] != zero {
                let f = m[i][col] / m[rank][col];
                for j in col..4 {
                    let v = m[rank][j] * f;
                    m[i][j] -= v;
                }
            }
        }
        rank += 1;
    }
    rank
}
