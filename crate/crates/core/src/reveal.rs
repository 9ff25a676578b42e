//! Detection state machines for the three relay classes and the
//! conflict scheduler built on clock-sync predictions.
//!
//! The tests run against any [`LinkScheduler`]: the base station's view of
//! the link plus the ability to grant traffic. They never see adversary
//! state.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{LocalTime, RefTime, TICKS_PER_NANO};
use crate::endpoints::{
    measure, tti_start, ConnectionState, ExpectedUplink, Grant, MeasureConfig, NodeStats,
    RetuneCommand, RetuneWhich, Rrc, RxReport, SlotOutcome, TTI_NS,
};
use crate::medium::{FrequencyHz, LinkMetrics, PacketKind};
use crate::sync::{
    consistency_check, plan_uplink_send, predict_base_receipt, predict_receipt, Direction,
    ExchangeRecord, SyncEstimate,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    MonitorChannel,
    Schedule,
    GrantTraffic,
    MonitorTraffic,
    CollectMetrics,
    DetectMim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    HalfDuplex,
    FullDuplex,
    DoubleFullDuplex,
}

impl TestKind {
    pub fn edges(self) -> &'static [(Phase, Phase)] {
        use Phase::*;
        match self {
            TestKind::HalfDuplex => &[
                (MonitorChannel, Schedule),
                (Schedule, CollectMetrics),
                (CollectMetrics, DetectMim),
                (DetectMim, MonitorChannel),
            ],
            TestKind::FullDuplex => &[
                (MonitorChannel, GrantTraffic),
                (GrantTraffic, MonitorTraffic),
                (MonitorTraffic, DetectMim),
                (DetectMim, MonitorChannel),
            ],
            TestKind::DoubleFullDuplex => &[
                (MonitorChannel, Schedule),
                (Schedule, MonitorTraffic),
                (MonitorTraffic, DetectMim),
                (DetectMim, MonitorChannel),
            ],
        }
    }

    pub fn allows(self, from: Phase, to: Phase) -> bool {
        self.edges().contains(&(from, to))
    }

    pub fn detected(self) -> Verdict {
        match self {
            TestKind::HalfDuplex => Verdict::HalfDuplexDetected,
            TestKind::FullDuplex => Verdict::FullDuplexDetected,
            TestKind::DoubleFullDuplex => Verdict::DoubleFullDuplexDetected,
        }
    }
}

/// True iff `phases` is a walk in the test's transition graph.
pub fn is_valid_path(test: TestKind, phases: &[Phase]) -> bool {
    phases.first().map_or(true, |&p| p == Phase::MonitorChannel)
        && phases.windows(2).all(|w| test.allows(w[0], w[1]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    NoMimEvidence,
    HalfDuplexDetected,
    FullDuplexDetected,
    DoubleFullDuplexDetected,
    Inconclusive,
}

impl Verdict {
    pub fn is_detected(self) -> bool {
        matches!(
            self,
            Verdict::HalfDuplexDetected | Verdict::FullDuplexDetected | Verdict::DoubleFullDuplexDetected
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::NoMimEvidence => "no-mim-evidence",
            Verdict::HalfDuplexDetected => "half-duplex",
            Verdict::FullDuplexDetected => "full-duplex",
            Verdict::DoubleFullDuplexDetected => "double-full-duplex",
            Verdict::Inconclusive => "inconclusive",
        }
    }

    pub fn parse(s: &str) -> Option<Verdict> {
        [
            Verdict::NoMimEvidence,
            Verdict::HalfDuplexDetected,
            Verdict::FullDuplexDetected,
            Verdict::DoubleFullDuplexDetected,
            Verdict::Inconclusive,
        ]
        .into_iter()
        .find(|v| v.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InconclusiveReason {
    PreconditionSnr,
    AckTimeout,
    SyncInvalid,
    RunEnded,
    AmbiguousTiming,
    ControlUnhealthy,
    PartialLoss,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub link: Option<LinkMetrics>,
    pub uplink: Option<NodeStats>,
    pub downlink: Option<NodeStats>,
    /// Arrival minus predicted arrival of challenge packets.
    pub added_delay_ns: Vec<i64>,
    pub rrc: Option<Rrc>,
    pub window: Option<(u64, u64)>,
}

impl Evidence {
    pub fn is_empty(&self) -> bool {
        self.link.is_none()
            && self.uplink.is_none()
            && self.downlink.is_none()
            && self.added_delay_ns.is_empty()
            && self.rrc.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionVerdict {
    pub test_id: u32,
    pub test: TestKind,
    pub verdict: Verdict,
    pub reason: Option<InconclusiveReason>,
    pub evidence_summary: Evidence,
    pub phases: Vec<Phase>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectorError {
    #[error("illegal transition {from:?} -> {to:?} for {test:?} test")]
    IllegalTransition { test: TestKind, from: Phase, to: Phase },
    #[error("detected verdict without evidence")]
    EmptyEvidence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorState {
    pub test: TestKind,
    pub test_id: u32,
    pub phase: Phase,
    pub evidence: Evidence,
    history: Vec<Phase>,
}

impl DetectorState {
    pub fn new(test: TestKind, test_id: u32) -> Self {
        DetectorState {
            test,
            test_id,
            phase: Phase::MonitorChannel,
            evidence: Evidence::default(),
            history: vec![Phase::MonitorChannel],
        }
    }

    pub fn history(&self) -> &[Phase] {
        &self.history
    }

    pub fn advance(&mut self, to: Phase) -> Result<(), DetectorError> {
        if !self.test.allows(self.phase, to) {
            return Err(DetectorError::IllegalTransition {
                test: self.test,
                from: self.phase,
                to,
            });
        }
        self.phase = to;
        self.history.push(to);
        Ok(())
    }

    pub fn conclude(
        self,
        verdict: Verdict,
        reason: Option<InconclusiveReason>,
    ) -> Result<DetectionVerdict, DetectorError> {
        if verdict.is_detected() && self.evidence.is_empty() {
            return Err(DetectorError::EmptyEvidence);
        }
        Ok(DetectionVerdict {
            test_id: self.test_id,
            test: self.test,
            verdict,
            reason,
            evidence_summary: self.evidence,
            phases: self.history,
        })
    }
}

/// Recent link quality as seen by the base station.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkQuality {
    pub uplink_samples: u32,
    pub uplink_min_snr_db: Option<f64>,
    pub downlink_snr_db: Option<f64>,
}

impl LinkQuality {
    pub fn passes(&self, threshold_db: f64) -> bool {
        self.uplink_samples > 0
            && self.uplink_min_snr_db.is_some_and(|s| s >= threshold_db)
            && self.downlink_snr_db.is_some_and(|s| s >= threshold_db)
    }
}

/// Base-station operations the detectors drive.
pub trait LinkScheduler {
    /// Next TTI to start.
    fn tti(&self) -> u64;
    /// TTIs left before the run ends.
    fn remaining_ttis(&self) -> u64;
    fn run_ttis(&mut self, n: u64);
    fn snr_threshold_db(&self) -> f64;
    fn measure_config(&self) -> MeasureConfig;
    fn link_quality(&self, window_ttis: u64) -> LinkQuality;
    fn records(&self) -> &[ExchangeRecord];
    fn sync_estimate(&self) -> Option<SyncEstimate>;
    /// Takes TTIs out of the normal schedule.
    fn reserve(&mut self, ttis: Range<u64>);
    /// Sends a control grant in `tti`; returns its packet id.
    fn send_grants(&mut self, tti: u64, grants: Vec<Grant>, reserved: Range<u64>) -> u64;
    /// Queues `count` back-to-back downlink packets at `offset_ns` into `tti`.
    fn schedule_downlink(&mut self, tti: u64, offset_ns: i64, packet_ns: i64, count: u32, kind: PacketKind) -> Vec<u64>;
    /// Registers an uplink the base expects inside `window`.
    fn expect_uplink(&mut self, tti: u64, kind: PacketKind, tx_local: Option<LocalTime>, window: (RefTime, RefTime)) -> u64;
    fn downlink_report(&self, packet_id: u64) -> Option<RxReport>;
    fn downlink_sent_at(&self, packet_id: u64) -> Option<RefTime>;
    fn uplink_slot(&self, slot: u64) -> Option<ExpectedUplink>;
    /// Sends an encrypted retune command in `tti`; returns its packet id.
    fn send_retune(&mut self, tti: u64, command: RetuneCommand) -> u64;
    /// Switches the base radio when `command.at_tti` starts.
    fn commit_retune(&mut self, command: RetuneCommand);
    fn base_connection(&self) -> ConnectionState;
    fn normal_uplink_outcomes(&self, ttis: Range<u64>) -> Vec<SlotOutcome>;
    fn retune_target(&self) -> FrequencyHz;
    fn log_phase(&mut self, test: TestKind, test_id: u32, phase: Phase);
    fn log_verdict(&mut self, verdict: &DetectionVerdict);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub window_ttis: u64,
    pub timeout_ttis: u64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            window_ttis: 20,
            timeout_ttis: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HalfDuplexConfig {
    pub burst_ttis: u32,
    pub slack_ns: i64,
    pub lead_ttis: u64,
    /// Extra TTIs of collection after the last expected arrival.
    pub collect_ttis: u64,
}

impl Default for HalfDuplexConfig {
    fn default() -> Self {
        HalfDuplexConfig {
            burst_ttis: 5,
            slack_ns: 200_000,
            lead_ttis: 6,
            collect_ttis: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FullDuplexConfig {
    pub window_ttis: u64,
    /// Every `control_every`-th TTI carries only unidirectional control.
    pub control_every: u64,
    pub per_threshold: f64,
    pub sync_tolerance_ns: i64,
    pub packet_ns: i64,
    pub control_packet_ns: i64,
    pub lead_ttis: u64,
    pub grace_ttis: u64,
}

impl Default for FullDuplexConfig {
    fn default() -> Self {
        FullDuplexConfig {
            window_ttis: 240,
            control_every: 12,
            per_threshold: 0.9,
            sync_tolerance_ns: 1_000,
            packet_ns: 500_000,
            control_packet_ns: 300_000,
            lead_ttis: 6,
            grace_ttis: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DoubleFullDuplexConfig {
    pub which: RetuneWhich,
    /// TTI at which the retune takes effect; `None` means as soon as possible.
    pub at_tti: Option<u64>,
    pub lead_ttis: u64,
    /// Observation after the retune, in TTIs.
    pub observe_ttis: u64,
}

impl Default for DoubleFullDuplexConfig {
    fn default() -> Self {
        DoubleFullDuplexConfig {
            which: RetuneWhich::Downlink,
            at_tti: None,
            lead_ttis: 10,
            observe_ttis: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestConfigs {
    pub gate: GateConfig,
    pub half_duplex: HalfDuplexConfig,
    pub full_duplex: FullDuplexConfig,
    pub double_full_duplex: DoubleFullDuplexConfig,
}

fn log_advance<S: LinkScheduler>(s: &mut S, st: &mut DetectorState, to: Phase) {
    st.advance(to).expect("test follows its transition table");
    s.log_phase(st.test, st.test_id, to);
}

fn finish<S: LinkScheduler>(
    s: &mut S,
    st: DetectorState,
    verdict: Verdict,
    reason: Option<InconclusiveReason>,
) -> DetectionVerdict {
    let v = st.conclude(verdict, reason).expect("detections carry evidence");
    s.log_verdict(&v);
    v
}

/// Runs TTIs until the SNR gate holds. False on timeout or end of run.
fn await_gate<S: LinkScheduler>(s: &mut S, gate: &GateConfig) -> bool {
    let thr = s.snr_threshold_db();
    for _ in 0..=gate.timeout_ttis {
        if s.link_quality(gate.window_ttis).passes(thr) {
            return true;
        }
        if s.remaining_ttis() == 0 {
            return false;
        }
        s.run_ttis(1);
    }
    false
}

/// Runs until `tti` has completed or the run ends. False if the run ended first.
fn run_until<S: LinkScheduler>(s: &mut S, tti: u64) -> bool {
    while s.tti() < tti {
        if s.remaining_ttis() == 0 {
            return false;
        }
        s.run_ttis(1);
    }
    true
}

/// Runs until `pred` holds or `deadline` TTI starts.
fn run_until_or<S: LinkScheduler>(s: &mut S, deadline: u64, pred: impl Fn(&S) -> bool) -> bool {
    loop {
        if pred(s) {
            return true;
        }
        if s.tti() >= deadline || s.remaining_ttis() == 0 {
            return false;
        }
        s.run_ttis(1);
    }
}

fn ticks_to_ns(sync: &SyncEstimate, ticks: i128) -> i64 {
    // local ticks -> reference ns
    (ticks as f64 / (sync.skew_hat.raw() as f64 / 1e12) / TICKS_PER_NANO as f64).round() as i64
}

/// Outcome rule of the long-packet test over per-direction added delays.
///
/// Detected if any challenge arrived at least `burst - slack` late;
/// no evidence if every challenge arrived within `slack` of prediction.
pub fn evaluate_half_duplex(added_delay_ns: &[Option<i64>], burst_ns: i64, slack_ns: i64) -> (Verdict, Option<InconclusiveReason>) {
    if added_delay_ns.iter().flatten().any(|&d| d >= burst_ns - slack_ns) {
        return (Verdict::HalfDuplexDetected, None);
    }
    if !added_delay_ns.is_empty() && added_delay_ns.iter().all(|d| d.is_some_and(|d| d.abs() <= slack_ns)) {
        return (Verdict::NoMimEvidence, None);
    }
    (Verdict::Inconclusive, Some(InconclusiveReason::AmbiguousTiming))
}

pub fn half_duplex_test<S: LinkScheduler>(
    s: &mut S,
    gate: &GateConfig,
    cfg: &HalfDuplexConfig,
    test_id: u32,
) -> DetectionVerdict {
    let mut st = DetectorState::new(TestKind::HalfDuplex, test_id);
    s.log_phase(st.test, test_id, Phase::MonitorChannel);
    if !await_gate(s, gate) {
        return finish(s, st, Verdict::Inconclusive, Some(InconclusiveReason::PreconditionSnr));
    }
    let Some(sync) = s.sync_estimate() else {
        return finish(s, st, Verdict::Inconclusive, Some(InconclusiveReason::SyncInvalid));
    };
    log_advance(s, &mut st, Phase::Schedule);

    let b = cfg.burst_ttis as u64;
    let burst_ns = b as i64 * TTI_NS;
    let now = s.tti();
    let k_dl = now + cfg.lead_ttis;
    // one idle TTI so a cut-through relay finishes the downlink first
    let k_ul = k_dl + b + 1;
    let k_end = k_ul + 2 * b + cfg.collect_ttis;
    if s.remaining_ttis() < k_end - now + 1 {
        return finish(s, st, Verdict::Inconclusive, Some(InconclusiveReason::RunEnded));
    }
    let reserved = k_dl - 1..k_ul + 2 * b + 1;
    s.reserve(reserved.clone());

    let ul_tx = plan_uplink_send(sync.skew_hat, sync.combined_up, tti_start(k_ul));
    let dl_grant = Grant {
        tti_index: k_dl,
        direction: Direction::Downlink,
        duration_ttis: cfg.burst_ttis,
        frequency: FrequencyHz::from_mhz(1),
        tx_local: None,
        packet_ns: TTI_NS,
        kind: PacketKind::Data,
    };
    let ul_grant = Grant {
        tti_index: k_ul,
        direction: Direction::Uplink,
        tx_local: Some(ul_tx),
        ..dl_grant
    };
    let predicted_ul = predict_base_receipt(sync.skew_hat, sync.combined_up, ul_tx);
    let slot = s.expect_uplink(k_ul, PacketKind::Data, Some(ul_tx), (predicted_ul, predicted_ul + burst_ns));
    let ctrl = s.send_grants(now + 1, vec![dl_grant, ul_grant], reserved);
    let dl_ids = s.schedule_downlink(k_dl, 0, TTI_NS, cfg.burst_ttis, PacketKind::Data);

    if !run_until_or(s, k_dl, |s| s.downlink_report(ctrl).is_some()) {
        return finish(s, st, Verdict::Inconclusive, Some(InconclusiveReason::AckTimeout));
    }
    log_advance(s, &mut st, Phase::CollectMetrics);
    if !run_until(s, k_end) {
        return finish(s, st, Verdict::Inconclusive, Some(InconclusiveReason::RunEnded));
    }
    log_advance(s, &mut st, Phase::DetectMim);

    let dl_delay = dl_ids.first().and_then(|&id| {
        let sent = s.downlink_sent_at(id)?;
        let r = s.downlink_report(id)?;
        let predicted = predict_receipt(sync.skew_hat, sync.combined_down, sent);
        Some(ticks_to_ns(&sync, (r.rx_stamp - predicted).ticks()))
    });
    let ul_delay = s
        .uplink_slot(slot)
        .and_then(|sl| sl.rx_start.map(|r| r - sl.window.0));
    let delays = [dl_delay, ul_delay];
    st.evidence.added_delay_ns = delays.iter().flatten().copied().collect();
    st.evidence.window = Some((k_dl, k_end));
    let (verdict, reason) = evaluate_half_duplex(&delays, burst_ns, cfg.slack_ns);
    // a fade around the window would also look like silence
    let fresh = run_until_or(s, k_end + gate.timeout_ttis, |s| s.link_quality(gate.window_ttis).uplink_samples > 0);
    let post_ok = fresh && s.link_quality(gate.window_ttis).passes(s.snr_threshold_db());
    if verdict == Verdict::HalfDuplexDetected && !post_ok {
        return finish(s, st, Verdict::Inconclusive, Some(InconclusiveReason::PreconditionSnr));
    }
    finish(s, st, verdict, reason)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConflictError {
    #[error("sync estimates fail the consistency check")]
    SyncInvalid,
    #[error("round trip {round_trip_ns} ns too long to guarantee overlap of {min_packet_ns} ns packets")]
    Unschedulable { round_trip_ns: i64, min_packet_ns: i64 },
}

/// Sync estimate that passed [`consistency_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidatedSync(SyncEstimate);

impl ValidatedSync {
    pub fn check(records: &[ExchangeRecord], sync: SyncEstimate, tol_ns: i64) -> Result<Self, ConflictError> {
        if consistency_check(records, sync.skew_hat, sync.combined_down, sync.combined_up, tol_ns as f64 * 1e-9) {
            Ok(ValidatedSync(sync))
        } else {
            Err(ConflictError::SyncInvalid)
        }
    }

    pub fn estimate(&self) -> &SyncEstimate {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConflictSchedule {
    pub base_tx: RefTime,
    pub mobile_tx: LocalTime,
    pub round_trip_ns: i64,
}

/// Transmit times making both packets cross the relay together.
///
/// The mobile sends so that its packet reaches the base half a round trip
/// after the base transmits. Wherever the relay sits on the path, the two
/// arrivals there differ by at most half the round trip, so the packets
/// overlap by at least half the shorter one when the round trip does not
/// exceed it.
pub fn schedule_conflict(
    sync: &ValidatedSync,
    base_tx: RefTime,
    dl_packet_ns: i64,
    ul_packet_ns: i64,
) -> Result<ConflictSchedule, ConflictError> {
    let e = sync.estimate();
    let mid = LocalTime::from_ticks((e.combined_down + e.combined_up).ticks() / 2);
    let mobile_tx = e.skew_hat.scale(base_tx) + mid;
    let rt_ticks = (e.combined_down - e.combined_up).ticks();
    let round_trip_ns = ticks_to_ns(e, rt_ticks);
    let min_packet_ns = dl_packet_ns.min(ul_packet_ns);
    if round_trip_ns > min_packet_ns {
        return Err(ConflictError::Unschedulable {
            round_trip_ns,
            min_packet_ns,
        });
    }
    Ok(ConflictSchedule {
        base_tx,
        mobile_tx,
        round_trip_ns,
    })
}

/// What the full-duplex detector derives from its challenge window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChallengeSummary {
    pub uplink_data_per: f64,
    pub downlink_per: f64,
    pub uplink_data_snr_db: Option<f64>,
    pub control_uplink_snr_db: Option<f64>,
    pub control_uplink_delivered: f64,
    pub control_downlink_delivered: f64,
}

/// Detected iff unidirectional control stays healthy while the challenge
/// traffic fails or arrives at collision-level SNR.
pub fn evaluate_full_duplex(
    w: &ChallengeSummary,
    per_threshold: f64,
    snr_threshold_db: f64,
) -> (Verdict, Option<InconclusiveReason>) {
    let healthy = w.control_uplink_snr_db.is_some_and(|s| s >= snr_threshold_db)
        && w.control_uplink_delivered >= 0.5
        && w.control_downlink_delivered >= 0.5;
    let collided = w.uplink_data_snr_db.is_some_and(|s| s < snr_threshold_db);
    let lossy = w.uplink_data_per.max(w.downlink_per) >= per_threshold;
    if !healthy {
        return (Verdict::Inconclusive, Some(InconclusiveReason::ControlUnhealthy));
    }
    if lossy || collided {
        return (Verdict::FullDuplexDetected, None);
    }
    if w.uplink_data_per == 0.0 && w.downlink_per == 0.0 {
        return (Verdict::NoMimEvidence, None);
    }
    (Verdict::Inconclusive, Some(InconclusiveReason::PartialLoss))
}

fn frac_delivered(outcomes: &[SlotOutcome]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    outcomes.iter().filter(|o| o.delivered).count() as f64 / outcomes.len() as f64
}

pub fn full_duplex_test<S: LinkScheduler>(
    s: &mut S,
    gate: &GateConfig,
    cfg: &FullDuplexConfig,
    test_id: u32,
) -> DetectionVerdict {
    let mut st = DetectorState::new(TestKind::FullDuplex, test_id);
    s.log_phase(st.test, test_id, Phase::MonitorChannel);
    if !await_gate(s, gate) {
        return finish(s, st, Verdict::Inconclusive, Some(InconclusiveReason::PreconditionSnr));
    }
    let valid = match s.sync_estimate().map(|e| ValidatedSync::check(s.records(), e, cfg.sync_tolerance_ns)) {
        Some(Ok(v)) => v,
        _ => return finish(s, st, Verdict::Inconclusive, Some(InconclusiveReason::SyncInvalid)),
    };
    let sync = *valid.estimate();
    log_advance(s, &mut st, Phase::GrantTraffic);

    let now = s.tti();
    let k0 = now + cfg.lead_ttis;
    let k_end = k0 + cfg.window_ttis;
    if s.remaining_ttis() < k_end + cfg.grace_ttis - now + 1 {
        return finish(s, st, Verdict::Inconclusive, Some(InconclusiveReason::RunEnded));
    }
    let reserved = k0..k_end;
    s.reserve(reserved.clone());

    let mut grants = Vec::new();
    let mut data_slots = Vec::new();
    let mut ctrl_slots = Vec::new();
    let mut dl_window = Vec::new();
    let mut dl_ctrl = Vec::new();
    for k in reserved.clone() {
        let t = tti_start(k);
        let control = (k - k0) % cfg.control_every == cfg.control_every - 1;
        let dl = s.schedule_downlink(k, 0, cfg.packet_ns, 1, PacketKind::Data);
        dl_window.extend(dl.iter().copied());
        let (tx, kind, len) = if control {
            dl_ctrl.extend(dl);
            // lands well after the downlink has cleared any relay
            let target = t + cfg.packet_ns + TTI_NS / 10;
            (plan_uplink_send(sync.skew_hat, sync.combined_up, target), PacketKind::Ack, cfg.control_packet_ns)
        } else {
            match schedule_conflict(&valid, t, cfg.packet_ns, cfg.packet_ns) {
                Ok(c) => (c.mobile_tx, PacketKind::Data, cfg.packet_ns),
                Err(_) => {
                    return finish(s, st, Verdict::Inconclusive, Some(InconclusiveReason::SyncInvalid));
                }
            }
        };
        let start = predict_base_receipt(sync.skew_hat, sync.combined_up, tx);
        let slot = s.expect_uplink(k, kind, Some(tx), (start, start + len));
        if control {
            ctrl_slots.push(slot);
        } else {
            data_slots.push(slot);
        }
        grants.push(Grant {
            tti_index: k,
            direction: Direction::Uplink,
            duration_ttis: 1,
            frequency: FrequencyHz::from_mhz(1),
            tx_local: Some(tx),
            packet_ns: len,
            kind,
        });
    }
    let ctrl = s.send_grants(now + 1, grants, reserved.clone());
    if !run_until_or(s, k0, |s| s.downlink_report(ctrl).is_some()) {
        return finish(s, st, Verdict::Inconclusive, Some(InconclusiveReason::AckTimeout));
    }
    log_advance(s, &mut st, Phase::MonitorTraffic);
    if !run_until(s, k_end + cfg.grace_ttis) {
        return finish(s, st, Verdict::Inconclusive, Some(InconclusiveReason::RunEnded));
    }
    log_advance(s, &mut st, Phase::DetectMim);

    let outcome = |s: &S, slot: u64| s.uplink_slot(slot).and_then(|x| x.outcome);
    let ul_data: Vec<SlotOutcome> = data_slots.iter().filter_map(|&x| outcome(s, x)).collect();
    let ul_ctrl: Vec<SlotOutcome> = ctrl_slots.iter().filter_map(|&x| outcome(s, x)).collect();
    let dl_outcome = |s: &S, id: u64| SlotOutcome {
        tti: 0,
        direction: Direction::Downlink,
        kind: PacketKind::Data,
        class: None,
        snr_db: s.downlink_report(id).map(|r| r.snr_db),
        delivered: s.downlink_report(id).is_some(),
        bytes: crate::endpoints::bytes_for(cfg.packet_ns),
        buffer_bytes: None,
    };
    let dl_all: Vec<SlotOutcome> = dl_window.iter().map(|&id| dl_outcome(s, id)).collect();
    let dl_c: Vec<SlotOutcome> = dl_ctrl.iter().map(|&id| dl_outcome(s, id)).collect();

    let window_ns = cfg.window_ttis as i64 * TTI_NS;
    let mcfg = MeasureConfig {
        mcs_pin: Some(1),
        ..s.measure_config()
    };
    let mut ul_window = ul_data.clone();
    ul_window.extend(ul_ctrl.iter().copied());
    let (ul_stats, ul_metrics) = measure(&ul_window, window_ns, &mcfg);
    let (dl_stats, _) = measure(&dl_all, window_ns, &mcfg);
    let (ul_data_stats, _) = measure(&ul_data, window_ns, &mcfg);

    let summary = ChallengeSummary {
        uplink_data_per: ul_data_stats.per,
        downlink_per: dl_stats.per,
        uplink_data_snr_db: ul_stats.ul_data_snr_db,
        control_uplink_snr_db: ul_stats.ul_ctrl_snr_db,
        control_uplink_delivered: frac_delivered(&ul_ctrl),
        control_downlink_delivered: frac_delivered(&dl_c),
    };
    st.evidence.uplink = Some(ul_stats);
    st.evidence.downlink = Some(dl_stats);
    st.evidence.link = Some(ul_metrics);
    st.evidence.window = Some((k0, k_end));
    let (verdict, reason) = evaluate_full_duplex(&summary, cfg.per_threshold, s.snr_threshold_db());
    finish(s, st, verdict, reason)
}

pub fn double_full_duplex_test<S: LinkScheduler>(
    s: &mut S,
    gate: &GateConfig,
    cfg: &DoubleFullDuplexConfig,
    test_id: u32,
) -> DetectionVerdict {
    let mut st = DetectorState::new(TestKind::DoubleFullDuplex, test_id);
    s.log_phase(st.test, test_id, Phase::MonitorChannel);
    if let Some(at) = cfg.at_tti {
        let start = at.saturating_sub(cfg.lead_ttis + gate.window_ttis);
        if !run_until(s, start) {
            return finish(s, st, Verdict::Inconclusive, Some(InconclusiveReason::RunEnded));
        }
    }
    if !await_gate(s, gate) {
        return finish(s, st, Verdict::Inconclusive, Some(InconclusiveReason::PreconditionSnr));
    }
    log_advance(s, &mut st, Phase::Schedule);

    let now = s.tti();
    let at_tti = cfg.at_tti.filter(|&t| t > now + cfg.lead_ttis).unwrap_or(now + 1 + cfg.lead_ttis);
    if s.remaining_ttis() < at_tti + cfg.observe_ttis - now + 1 {
        return finish(s, st, Verdict::Inconclusive, Some(InconclusiveReason::RunEnded));
    }
    let command = RetuneCommand {
        target: s.retune_target(),
        which: cfg.which,
        at_tti,
    };
    let send_tti = at_tti - cfg.lead_ttis;
    if !run_until(s, send_tti) {
        return finish(s, st, Verdict::Inconclusive, Some(InconclusiveReason::RunEnded));
    }
    let id = s.send_retune(send_tti, command);
    if !run_until_or(s, at_tti - 1, |s| s.downlink_report(id).is_some()) {
        return finish(s, st, Verdict::Inconclusive, Some(InconclusiveReason::AckTimeout));
    }
    s.commit_retune(command);
    log_advance(s, &mut st, Phase::MonitorTraffic);
    if !run_until(s, at_tti + cfg.observe_ttis) {
        return finish(s, st, Verdict::Inconclusive, Some(InconclusiveReason::RunEnded));
    }
    log_advance(s, &mut st, Phase::DetectMim);

    let conn = s.base_connection();
    let after = s.normal_uplink_outcomes(at_tti..at_tti + cfg.observe_ttis);
    let mcfg = s.measure_config();
    let (stats, metrics) = measure(&after, cfg.observe_ttis as i64 * TTI_NS, &mcfg);
    st.evidence.uplink = Some(stats);
    st.evidence.link = Some(metrics);
    st.evidence.rrc = Some(conn.rrc);
    st.evidence.window = Some((at_tti, at_tti + cfg.observe_ttis));
    let delivered = frac_delivered(&after);
    let (verdict, reason) = if conn.rrc == Rrc::Disconnected && conn.since >= tti_start(at_tti) {
        (Verdict::DoubleFullDuplexDetected, None)
    } else if conn.rrc == Rrc::Connected && delivered >= 0.5 {
        (Verdict::NoMimEvidence, None)
    } else {
        (Verdict::Inconclusive, Some(InconclusiveReason::PartialLoss))
    };
    finish(s, st, verdict, reason)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolPolicy {
    pub tests: Vec<TestKind>,
    pub cycles: u32,
    /// Keep testing after a detection.
    pub continuous: bool,
    pub gap_ttis: u64,
}

impl Default for ProtocolPolicy {
    fn default() -> Self {
        ProtocolPolicy {
            tests: vec![TestKind::HalfDuplex, TestKind::FullDuplex, TestKind::DoubleFullDuplex],
            cycles: 1,
            continuous: false,
            gap_ttis: 10,
        }
    }
}

pub fn run_test<S: LinkScheduler>(s: &mut S, test: TestKind, cfgs: &TestConfigs, test_id: u32) -> DetectionVerdict {
    match test {
        TestKind::HalfDuplex => half_duplex_test(s, &cfgs.gate, &cfgs.half_duplex, test_id),
        TestKind::FullDuplex => full_duplex_test(s, &cfgs.gate, &cfgs.full_duplex, test_id),
        TestKind::DoubleFullDuplex => double_full_duplex_test(s, &cfgs.gate, &cfgs.double_full_duplex, test_id),
    }
}

/// Executes the policy's tests in order. A detection ends the run unless
/// the policy is continuous.
pub fn run_protocol<S: LinkScheduler>(s: &mut S, policy: &ProtocolPolicy, cfgs: &TestConfigs) -> Vec<DetectionVerdict> {
    let mut out = Vec::new();
    let mut id = 0;
    for _ in 0..policy.cycles {
        for &test in &policy.tests {
            let v = run_test(s, test, cfgs, id);
            id += 1;
            let stop = v.verdict.is_detected() && !policy.continuous;
            out.push(v);
            if stop {
                return out;
            }
            let gap = policy.gap_ttis.min(s.remaining_ttis());
            s.run_ttis(gap);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{local_of, ClockParams, Skew};
    use crate::sync::{ExchangeSession, PathDelays};

    #[test]
    fn transition_tables_reach_detect_only_after_collection() {
        for t in [TestKind::HalfDuplex, TestKind::FullDuplex, TestKind::DoubleFullDuplex] {
            for &(from, to) in t.edges() {
                if to == Phase::DetectMim {
                    assert!(matches!(from, Phase::CollectMetrics | Phase::MonitorTraffic));
                }
            }
        }
    }

    #[test]
    fn illegal_transition_rejected() {
        let mut st = DetectorState::new(TestKind::HalfDuplex, 0);
        assert!(st.advance(Phase::DetectMim).is_err());
        st.advance(Phase::Schedule).unwrap();
        st.advance(Phase::CollectMetrics).unwrap();
        st.advance(Phase::DetectMim).unwrap();
        assert!(is_valid_path(TestKind::HalfDuplex, st.history()));
        assert!(!is_valid_path(TestKind::FullDuplex, st.history()));
    }

    #[test]
    fn detection_needs_evidence() {
        let st = DetectorState::new(TestKind::FullDuplex, 0);
        assert_eq!(
            st.clone().conclude(Verdict::FullDuplexDetected, None),
            Err(DetectorError::EmptyEvidence)
        );
        assert!(st.conclude(Verdict::NoMimEvidence, None).is_ok());
    }

    #[test]
    fn half_duplex_rule() {
        let b = 5_000_000;
        let s = 200_000;
        assert_eq!(evaluate_half_duplex(&[Some(0), Some(3)], b, s).0, Verdict::NoMimEvidence);
        assert_eq!(evaluate_half_duplex(&[Some(4_933_300), Some(0)], b, s).0, Verdict::HalfDuplexDetected);
        assert_eq!(evaluate_half_duplex(&[Some(1_000_000), Some(0)], b, s).0, Verdict::Inconclusive);
        assert_eq!(evaluate_half_duplex(&[None, Some(0)], b, s).0, Verdict::Inconclusive);
    }

    fn summary(ul_per: f64, dl_per: f64, ul_snr: f64) -> ChallengeSummary {
        ChallengeSummary {
            uplink_data_per: ul_per,
            downlink_per: dl_per,
            uplink_data_snr_db: Some(ul_snr),
            control_uplink_snr_db: Some(18.0),
            control_uplink_delivered: 1.0,
            control_downlink_delivered: 1.0,
        }
    }

    #[test]
    fn full_duplex_rule() {
        assert_eq!(evaluate_full_duplex(&summary(1.0, 0.9, 1.0), 0.9, 10.0).0, Verdict::FullDuplexDetected);
        assert_eq!(evaluate_full_duplex(&summary(0.0, 0.917, 18.0), 0.9, 10.0).0, Verdict::FullDuplexDetected);
        assert_eq!(evaluate_full_duplex(&summary(0.0, 0.0, 18.0), 0.9, 10.0).0, Verdict::NoMimEvidence);
        let mut sick = summary(1.0, 1.0, 1.0);
        sick.control_uplink_snr_db = Some(1.0);
        assert_eq!(
            evaluate_full_duplex(&sick, 0.9, 10.0),
            (Verdict::Inconclusive, Some(InconclusiveReason::ControlUnhealthy))
        );
    }

    fn valid(clock: ClockParams, delays: PathDelays) -> ValidatedSync {
        let recs = ExchangeSession::new(clock, delays, 20).synthesize();
        let e = SyncEstimate::from_records(&recs).unwrap();
        ValidatedSync::check(&recs, e, 1_000).unwrap()
    }

    #[test]
    fn symmetric_conflict_meets_at_midpoint() {
        let clock = ClockParams::new(1.0, 0.0).unwrap();
        let v = valid(clock, PathDelays::symmetric(5_200));
        let c = schedule_conflict(&v, RefTime::from_nanos(2_000_000_000), 500_000, 500_000).unwrap();
        // mobile transmits at the same reference instant as the base
        assert_eq!(c.mobile_tx, local_of(&clock, RefTime::from_nanos(2_000_000_000)));
        assert_eq!(c.round_trip_ns, 10_400);
    }

    #[test]
    fn conflict_rejects_long_round_trip() {
        let clock = ClockParams::new(1.0, 0.0).unwrap();
        let v = valid(clock, PathDelays::symmetric(400_000));
        assert!(matches!(
            schedule_conflict(&v, RefTime::from_nanos(2_000_000_000), 500_000, 500_000),
            Err(ConflictError::Unschedulable { .. })
        ));
    }

    #[test]
    fn inconsistent_sync_rejected() {
        let clock = ClockParams::new(1.0, 0.0).unwrap();
        let mut recs = ExchangeSession::new(clock, PathDelays::symmetric(500), 20).synthesize();
        let e = SyncEstimate::from_records(&recs).unwrap();
        recs[5].mobile_stamp = recs[5].mobile_stamp + LocalTime::from_nanos(50_000);
        assert_eq!(ValidatedSync::check(&recs, e, 1_000), Err(ConflictError::SyncInvalid));
    }

    proptest::proptest! {
        /// Interval oracle: with the relay anywhere on the path and arbitrary
        /// per-direction delays, the two packets overlap at the relay by at
        /// least half their length.
        #[test]
        fn conflict_overlap_guarantee(
            skew_ppm in -5000i64..5000,
            offset_us in -1_000_000i64..1_000_000,
            up_to_mim in 0i64..3_000,
            mim_to_down in 0i64..3_000,
            fwd_bm in 0i64..20_000,
            fwd_mb in 0i64..20_000,
            t_ms in 1_000i64..5_000,
        ) {
            let skew = Skew::from_raw(crate::clock::SKEW_ONE + skew_ppm * 1_000_000);
            let clock = ClockParams { skew, offset: LocalTime::from_nanos(offset_us * 1_000) };
            let d_bm = up_to_mim + fwd_bm + mim_to_down;
            let d_mb = mim_to_down + fwd_mb + up_to_mim;
            let v = valid(clock, PathDelays { d_bm_ns: d_bm, d_mb_ns: d_mb });
            let dur = 500_000;
            let t = RefTime::from_nanos(t_ms * 1_000_000);
            let c = schedule_conflict(&v, t, dur, dur).unwrap();
            let mobile_ref = crate::clock::ref_of(&clock, c.mobile_tx);
            let dl_at_mim = t + up_to_mim;
            let ul_at_mim = mobile_ref + mim_to_down;
            let overlap = dur - (dl_at_mim - ul_at_mim).abs();
            proptest::prop_assert!(overlap >= dur / 2, "overlap {}", overlap);
        }
    }
}
