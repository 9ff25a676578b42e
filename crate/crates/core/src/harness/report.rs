use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::endpoints::{measure, ConnectionState, MeasureConfig, NodeStats, TTI_NS};
use crate::reveal::{DetectionVerdict, Verdict};
use crate::sync::SyncEstimate;

use super::engine::Simulation;

/// Summary of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub ttis: u64,
    pub verdicts: Vec<DetectionVerdict>,
    pub sync: Option<SyncEstimate>,
    pub timing_advance_us: Option<f64>,
    pub downlink: NodeStats,
    pub uplink: NodeStats,
    pub base_rrc: Vec<ConnectionState>,
    pub mobile_rrc: Vec<ConnectionState>,
    pub mim_forwards: u64,
    pub mim_drops: u64,
    pub event_counts: BTreeMap<String, u64>,
    /// Wall-clock time of the event loop. Zero until set by [`run`](super::run).
    pub runtime_ms: f64,
}

impl RunReport {
    pub fn of(sim: &Simulation) -> Self {
        let cfg = sim.config();
        let mcfg = MeasureConfig::for_channel(&cfg.channel);
        let span = cfg.run_ttis as i64 * TTI_NS;
        let all = 0..cfg.run_ttis;
        let (downlink, _) = measure(&sim.base().downlink_outcomes(all.clone()), span, &mcfg);
        let (uplink, _) = measure(&sim.base().uplink_outcomes(all), span, &mcfg);
        RunReport {
            scenario: cfg.name.clone(),
            seed: cfg.seed,
            ttis: cfg.run_ttis,
            verdicts: sim.verdicts().to_vec(),
            sync: sim.sync(),
            timing_advance_us: sim.timing_advance().map(|t| t.as_us()),
            downlink,
            uplink,
            base_rrc: sim.base().monitor.history().to_vec(),
            mobile_rrc: sim.mobile().monitor.history().to_vec(),
            mim_forwards: sim.mim().map_or(0, |m| m.state.forwards.len() as u64),
            mim_drops: sim.mim().map_or(0, |m| m.state.drops.len() as u64),
            event_counts: sim.trace().counts().clone(),
            runtime_ms: 0.0,
        }
    }

    /// Verdict of the last test run, if any.
    pub fn final_verdict(&self) -> Option<Verdict> {
        self.verdicts.last().map(|v| v.verdict)
    }

    /// First detecting verdict, or the last verdict when none detected.
    pub fn overall(&self) -> Option<Verdict> {
        self.verdicts
            .iter()
            .find(|v| v.verdict.is_detected())
            .or(self.verdicts.last())
            .map(|v| v.verdict)
    }

    /// Copy with the runtime cleared, for comparing runs.
    pub fn without_runtime(&self) -> Self {
        RunReport {
            runtime_ms: 0.0,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}
