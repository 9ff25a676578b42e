use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{ClockParams, SkewBand};
use crate::endpoints::{FrequencyPlan, DEFAULT_DISCONNECT_AFTER, TTI_NS};
use crate::medium::{ChannelConfig, Reachability};
use crate::mim::MimConfig;
use crate::reveal::{ProtocolPolicy, TestConfigs};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClockSpec {
    pub skew: f64,
    #[serde(default)]
    pub offset_s: f64,
}

impl Default for ClockSpec {
    fn default() -> Self {
        ClockSpec {
            skew: 1.0,
            offset_s: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrafficConfig {
    /// Downlink/uplink probe pairs exchanged at attach.
    pub attach_probes: u64,
    pub probe_ns: i64,
    pub data_ns: i64,
    pub control_ns: i64,
    /// Uplink grants ride this many TTIs ahead of their TTI.
    pub grant_lead_ttis: u64,
    pub disconnect_after: u32,
    /// Uniform jitter on mobile receive stamps.
    pub stamp_jitter_ns: i64,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        TrafficConfig {
            attach_probes: 16,
            probe_ns: 66_700,
            data_ns: 500_000,
            control_ns: 200_000,
            grant_lead_ttis: 3,
            disconnect_after: DEFAULT_DISCONNECT_AFTER,
            stamp_jitter_ns: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_run_ttis")]
    pub run_ttis: u64,
    #[serde(default)]
    pub clock: ClockSpec,
    #[serde(default)]
    pub channel: ChannelConfig,
    #[serde(default)]
    pub reach: Reachability,
    #[serde(default)]
    pub plan: FrequencyPlan,
    #[serde(default)]
    pub mim: Option<MimConfig>,
    #[serde(default)]
    pub traffic: TrafficConfig,
    #[serde(default)]
    pub policy: ProtocolPolicy,
    #[serde(default)]
    pub tests: TestConfigs,
}

fn default_run_ttis() -> u64 {
    1_000
}

/// One violated constraint, pinned to the offending field.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid configuration:\n{}", .0.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<FieldError>),
}

impl ConfigError {
    pub fn fields(&self) -> &[FieldError] {
        match self {
            ConfigError::Invalid(v) => v,
            ConfigError::Parse(_) => &[],
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn clock_params(&self) -> Result<ClockParams, crate::clock::ClockError> {
        ClockParams::with_band(self.clock.skew, self.clock.offset_s, SkewBand::default())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        let mut err = |field: &str, message: String| {
            errs.push(FieldError {
                field: field.to_string(),
                message,
            })
        };
        if let Err(e) = self.clock_params() {
            err("clock.skew", e.to_string());
        }
        if let Err(e) = self.channel.validate() {
            err("channel", e.to_string());
        }
        if let Some(m) = &self.mim {
            if let Err(e) = m.validate() {
                err("mim", e.to_string());
            }
        }
        if self.plan.all_mhz().contains(&0) {
            err("plan", "frequencies must be positive".into());
        }
        let base = self.plan.base_radio();
        if base.tx == base.rx {
            err("plan.base_rx_mhz", "base station would receive its own carrier".into());
        }
        let mobile = self.plan.mobile_radio();
        if mobile.tx == mobile.rx {
            err("plan.mobile_rx_mhz", "mobile would receive its own carrier".into());
        }
        let t = &self.traffic;
        for (name, v) in [
            ("traffic.probe_ns", t.probe_ns),
            ("traffic.data_ns", t.data_ns),
            ("traffic.control_ns", t.control_ns),
        ] {
            if v <= 0 {
                err(name, "packet duration must be positive".into());
            } else if v > TTI_NS {
                err(name, "packet must fit in one TTI".into());
            }
        }
        if t.attach_probes < 2 {
            err("traffic.attach_probes", "need at least two probe pairs".into());
        }
        if t.grant_lead_ttis < 2 {
            err("traffic.grant_lead_ttis", "uplink grants need at least two TTIs of lead".into());
        }
        if t.disconnect_after == 0 {
            err("traffic.disconnect_after", "must be at least one".into());
        }
        if t.stamp_jitter_ns < 0 {
            err("traffic.stamp_jitter_ns", "must be non-negative".into());
        }
        if self.run_ttis <= 2 * t.attach_probes {
            err("run_ttis", "run ends before attach completes".into());
        }
        if self.channel.snr_jitter_db < 0.0 {
            err("channel.snr_jitter_db", "must be non-negative".into());
        }
        if self.tests.half_duplex.burst_ttis == 0 {
            err("tests.half_duplex.burst_ttis", "burst must span at least one TTI".into());
        }
        if self.tests.full_duplex.control_every < 2 {
            err("tests.full_duplex.control_every", "must be at least two".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "t"
[clock]
skew = 1.001
"#;

    #[test]
    fn minimal_file_gets_defaults() {
        let c = ScenarioConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.run_ttis, 1_000);
        assert_eq!(c.channel.prop_delay_ns, 500);
        assert!(c.mim.is_none());
    }

    #[test]
    fn zero_skew_cites_clock_field() {
        let e = ScenarioConfig::from_toml("name = \"t\"\n[clock]\nskew = 0.0\n").unwrap_err();
        assert_eq!(e.fields()[0].field, "clock.skew");
        assert!(e.to_string().contains("skew"));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            ScenarioConfig::from_toml("name = \"t\"\nbogus = 1\n"),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn toml_round_trip() {
        let c = ScenarioConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(ScenarioConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn zero_duration_packets_rejected() {
        let e = ScenarioConfig::from_toml("name = \"t\"\n[traffic]\ndata_ns = 0\n").unwrap_err();
        assert_eq!(e.fields()[0].field, "traffic.data_ns");
    }
}
