//! Bundled scenarios for the benchmarks.

use reveal_core::ScenarioConfig;

pub const SCENARIOS: [(&str, &str); 5] = [
    ("direct_link", include_str!("../../../scenarios/direct_link.toml")),
    ("halfduplex_attack", include_str!("../../../scenarios/halfduplex_attack.toml")),
    ("fullduplex_attack", include_str!("../../../scenarios/fullduplex_attack.toml")),
    ("fullduplex_prefer_uplink", include_str!("../../../scenarios/fullduplex_prefer_uplink.toml")),
    ("double_fdx", include_str!("../../../scenarios/double_fdx.toml")),
];

pub fn scenario(name: &str) -> ScenarioConfig {
    let (_, text) = SCENARIOS.iter().find(|(n, _)| *n == name).expect("bundled scenario");
    ScenarioConfig::from_toml(text).expect("bundled scenarios parse")
}
