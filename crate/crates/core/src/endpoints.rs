//! Base-station and mobile node behavior: grants, payloads, acks, link
//! measurement, frequency retune and connection-state tracking.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{local_of, ClockParams, LocalTime, RefTime, Skew, TICKS_PER_NANO};
use crate::medium::{ChannelConfig, FrequencyHz, LinkMetrics, PacketKind, ReceptionClass};
use crate::sync::{predict_receipt, Direction, ExchangeRecord};

pub const TTI_NS: i64 = 1_000_000;

pub fn tti_start(tti: u64) -> RefTime {
    RefTime::from_nanos(tti as i64 * TTI_NS)
}

/// Carrier assignment of both stations. `mobile_rx`/`base_rx` differ from
/// the transmit carriers only when a relay shifts frequencies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrequencyPlan {
    pub downlink_mhz: u64,
    pub uplink_mhz: u64,
    #[serde(default)]
    pub mobile_rx_mhz: Option<u64>,
    #[serde(default)]
    pub base_rx_mhz: Option<u64>,
    #[serde(default = "default_retune")]
    pub retune_mhz: u64,
}

fn default_retune() -> u64 {
    2600
}

impl Default for FrequencyPlan {
    fn default() -> Self {
        FrequencyPlan {
            downlink_mhz: 2400,
            uplink_mhz: 2500,
            mobile_rx_mhz: None,
            base_rx_mhz: None,
            retune_mhz: default_retune(),
        }
    }
}

impl FrequencyPlan {
    pub fn base_radio(&self) -> Radio {
        Radio {
            tx: FrequencyHz::from_mhz(self.downlink_mhz),
            rx: FrequencyHz::from_mhz(self.base_rx_mhz.unwrap_or(self.uplink_mhz)),
        }
    }

    pub fn mobile_radio(&self) -> Radio {
        Radio {
            tx: FrequencyHz::from_mhz(self.uplink_mhz),
            rx: FrequencyHz::from_mhz(self.mobile_rx_mhz.unwrap_or(self.downlink_mhz)),
        }
    }

    pub fn retune_target(&self) -> FrequencyHz {
        FrequencyHz::from_mhz(self.retune_mhz)
    }

    pub fn all_mhz(&self) -> Vec<u64> {
        let mut v = vec![self.downlink_mhz, self.uplink_mhz, self.retune_mhz];
        v.extend(self.mobile_rx_mhz);
        v.extend(self.base_rx_mhz);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Radio {
    pub tx: FrequencyHz,
    pub rx: FrequencyHz,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grant {
    pub tti_index: u64,
    pub direction: Direction,
    pub duration_ttis: u32,
    pub frequency: FrequencyHz,
    /// Local send time of the first uplink packet. `None` means "answer
    /// `probe_response` after receiving the carrying packet".
    pub tx_local: Option<LocalTime>,
    /// Length of each packet; `duration_ttis` packets go back to back.
    pub packet_ns: i64,
    pub kind: PacketKind,
}

impl Grant {
    pub fn with_packet_ns(mut self, ns: i64) -> Self {
        self.packet_ns = ns;
        self
    }

    pub fn at_local(mut self, t: LocalTime) -> Self {
        self.tx_local = Some(t);
        self
    }

    pub fn of_kind(mut self, kind: PacketKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn ttis(&self) -> std::ops::Range<u64> {
        self.tti_index..self.tti_index + self.duration_ttis as u64
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrantError {
    #[error("grant for TTI {tti} is not in the future (now {now})")]
    NotFuture { tti: u64, now: u64 },
    #[error("grant must span at least one TTI")]
    ZeroDuration,
    #[error("frequency {0} is not in the station plan")]
    OffPlan(FrequencyHz),
}

/// Builds a grant of `duration_ttis` full-TTI data packets.
pub fn schedule_grant(
    now_tti: u64,
    direction: Direction,
    tti: u64,
    duration_ttis: u32,
    frequency: FrequencyHz,
    plan: &[FrequencyHz],
) -> Result<Grant, GrantError> {
    if tti <= now_tti {
        return Err(GrantError::NotFuture { tti, now: now_tti });
    }
    if duration_ttis == 0 {
        return Err(GrantError::ZeroDuration);
    }
    if !plan.contains(&frequency) {
        return Err(GrantError::OffPlan(frequency));
    }
    Ok(Grant {
        tti_index: tti,
        direction,
        duration_ttis,
        frequency,
        tx_local: None,
        packet_ns: TTI_NS,
        kind: PacketKind::Data,
    })
}

/// Shared secret of the two stations. Nothing else can construct one.
#[derive(Clone, PartialEq, Eq)]
pub struct SessionKey(u64);

impl SessionKey {
    pub fn derive(seed: u64) -> Self {
        SessionKey(seed ^ 0x5eed_c0de_0bad_f00d)
    }
}

impl std::fmt::Debug for SessionKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SessionKey(..)")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetuneWhich {
    Uplink,
    Downlink,
    Both,
}

/// Carrier offset used for the uplink when both directions move.
pub const BOTH_UPLINK_OFFSET_MHZ: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetuneCommand {
    pub target: FrequencyHz,
    pub which: RetuneWhich,
    pub at_tti: u64,
}

impl RetuneCommand {
    /// Radio after the command takes effect, seen from one station.
    pub fn apply(&self, radio: Radio, station: Station) -> Radio {
        let up = match self.which {
            RetuneWhich::Both => FrequencyHz::from_mhz(self.target.hz() / 1_000_000 + BOTH_UPLINK_OFFSET_MHZ),
            _ => self.target,
        };
        let moves_dl = matches!(self.which, RetuneWhich::Downlink | RetuneWhich::Both);
        let moves_ul = matches!(self.which, RetuneWhich::Uplink | RetuneWhich::Both);
        let mut r = radio;
        match station {
            Station::Base => {
                if moves_dl {
                    r.tx = self.target;
                }
                if moves_ul {
                    r.rx = up;
                }
            }
            Station::Mobile => {
                if moves_dl {
                    r.rx = self.target;
                }
                if moves_ul {
                    r.tx = up;
                }
            }
        }
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Station {
    Base,
    Mobile,
}

/// Opaque control message. Its content is reachable only with the
/// session key.
#[derive(Debug, Clone, PartialEq)]
pub struct EncryptedControl {
    key_check: u64,
    command: RetuneCommand,
}

impl EncryptedControl {
    pub fn seal(command: RetuneCommand, key: &SessionKey) -> Self {
        EncryptedControl {
            key_check: key.0,
            command,
        }
    }

    pub fn open(&self, key: &SessionKey) -> Option<RetuneCommand> {
        (self.key_check == key.0).then_some(self.command)
    }
}

/// Payload carrying a frequency change; see [`RetuneCommand`].
pub fn retune(target: FrequencyHz, which: RetuneWhich, at_tti: u64, key: &SessionKey) -> Payload {
    Payload {
        control: Some(EncryptedControl::seal(
            RetuneCommand {
                target,
                which,
                at_tti,
            },
            key,
        )),
        ..Payload::default()
    }
}

/// Mobile's report of a decoded downlink packet. Doubles as the ack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RxReport {
    pub packet_id: u64,
    pub tti: u64,
    pub rx_stamp: LocalTime,
    pub snr_db: f64,
}

/// What the mobile needs to predict downlink arrivals on its own clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingCommand {
    pub skew: Skew,
    pub combined_down: LocalTime,
}

impl TimingCommand {
    pub fn arrival_local(&self, base_send: RefTime) -> LocalTime {
        predict_receipt(self.skew, self.combined_down, base_send)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Payload {
    pub data_bytes: u32,
    /// Downlink: base send time.
    pub base_stamp: Option<RefTime>,
    /// Uplink: mobile send time.
    pub mobile_stamp: Option<LocalTime>,
    /// Uplink: decoded downlink packets.
    pub reports: Vec<RxReport>,
    /// Downlink: decoded uplink packet ids.
    pub ul_acks: Vec<u64>,
    pub grants: Vec<Grant>,
    /// TTIs (half-open) taken out of the normal schedule.
    pub reserved: Option<(u64, u64)>,
    pub timing: Option<TimingCommand>,
    pub dl_snr_db: Option<f64>,
    pub buffer_bytes: Option<u32>,
    pub control: Option<EncryptedControl>,
}

impl Payload {
    pub fn empty_data() -> Self {
        Payload::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rrc {
    Idle,
    Connected,
    Disconnected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectionState {
    pub rrc: Rrc,
    pub since: RefTime,
}

pub const DEFAULT_DISCONNECT_AFTER: u32 = 10;

/// Declares the link lost after `threshold` consecutive missed expected
/// receptions. Disconnected is final.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectionMonitor {
    pub threshold: u32,
    misses: u32,
    state: ConnectionState,
    history: Vec<ConnectionState>,
}

impl ConnectionMonitor {
    pub fn new(threshold: u32) -> Self {
        assert!(threshold >= 1, "threshold must be at least one");
        let state = ConnectionState {
            rrc: Rrc::Idle,
            since: RefTime::ZERO,
        };
        ConnectionMonitor {
            threshold,
            misses: 0,
            state,
            history: vec![state],
        }
    }

    pub fn state(&self) -> ConnectionState {
        self.state
    }

    pub fn history(&self) -> &[ConnectionState] {
        &self.history
    }

    pub fn consecutive_misses(&self) -> u32 {
        self.misses
    }

    fn enter(&mut self, rrc: Rrc, now: RefTime) -> Option<ConnectionState> {
        if self.state.rrc == rrc {
            return None;
        }
        self.state = ConnectionState { rrc, since: now };
        self.history.push(self.state);
        Some(self.state)
    }

    pub fn attach(&mut self, now: RefTime) -> Option<ConnectionState> {
        if self.state.rrc == Rrc::Idle {
            self.enter(Rrc::Connected, now)
        } else {
            None
        }
    }

    /// Feeds one expected reception. Returns the new state on a change.
    pub fn observe(&mut self, now: RefTime, received: bool) -> Option<ConnectionState> {
        if self.state.rrc != Rrc::Connected {
            return None;
        }
        if received {
            self.misses = 0;
            return None;
        }
        self.misses += 1;
        if self.misses >= self.threshold {
            self.enter(Rrc::Disconnected, now)
        } else {
            None
        }
    }
}

/// Outcome of one expected transmission, as seen by the measuring side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotOutcome {
    pub tti: u64,
    pub direction: Direction,
    pub kind: PacketKind,
    pub class: Option<ReceptionClass>,
    pub snr_db: Option<f64>,
    pub delivered: bool,
    pub bytes: u32,
    pub buffer_bytes: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasureConfig {
    pub threshold_db: f64,
    pub clear_cqi: u8,
    pub mcs_pin: Option<u8>,
    pub carried_buffer: u32,
    /// Reported when the window holds no SNR sample.
    pub silent_snr_db: f64,
    pub noise_floor_dbm: f64,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        MeasureConfig {
            threshold_db: 10.0,
            clear_cqi: 15,
            mcs_pin: None,
            carried_buffer: DEFAULT_BUFFER_BYTES,
            silent_snr_db: -5.0,
            noise_floor_dbm: -82.0,
        }
    }
}

pub const DEFAULT_BUFFER_BYTES: u32 = 8_610;
pub const MAX_PHR: u8 = 40;
pub const MAX_CQI: u8 = 15;
pub const MAX_MCS: u8 = 28;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeStats {
    pub acks: u32,
    pub nacks: u32,
    pub per: f64,
    pub bitrate_bps: f64,
    pub buffer_bytes: u32,
    pub phr: u8,
    pub cqi: u8,
    pub mcs: u8,
    pub ul_data_snr_db: Option<f64>,
    pub ul_ctrl_snr_db: Option<f64>,
}

pub fn cqi_for_snr(snr_db: f64, threshold_db: f64, clear_cqi: u8) -> u8 {
    if snr_db >= threshold_db {
        clear_cqi.min(MAX_CQI)
    } else if snr_db >= 0.0 {
        1
    } else {
        0
    }
}

pub fn mcs_for_cqi(cqi: u8) -> u8 {
    ((cqi.min(MAX_CQI) as u32 * MAX_MCS as u32 + 7) / MAX_CQI as u32) as u8
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Aggregates a measurement window spanning `window_ns`.
///
/// Acks, nacks and bitrate count data slots only. PHR is 40 when any
/// uplink slot in the window succeeded and 0 when all failed.
pub fn measure(window: &[SlotOutcome], window_ns: i64, cfg: &MeasureConfig) -> (NodeStats, LinkMetrics) {
    let data = window.iter().filter(|s| s.kind == PacketKind::Data);
    let (acks, nacks) = data.fold((0u32, 0u32), |(a, n), s| {
        if s.delivered {
            (a + 1, n)
        } else {
            (a, n + 1)
        }
    });
    let per = if acks + nacks > 0 {
        nacks as f64 / (acks + nacks) as f64
    } else {
        0.0
    };
    let bits: f64 = window
        .iter()
        .filter(|s| s.kind == PacketKind::Data && s.delivered)
        .map(|s| s.bytes as f64 * 8.0)
        .sum();
    let bitrate_bps = if window_ns > 0 {
        bits / (window_ns as f64 / 1e9)
    } else {
        0.0
    };
    let uplink: Vec<&SlotOutcome> = window.iter().filter(|s| s.direction == Direction::Uplink).collect();
    let phr = if uplink.iter().any(|s| s.delivered) { MAX_PHR } else { 0 };
    let buffer_bytes = uplink
        .iter()
        .rev()
        .find_map(|s| if s.delivered { s.buffer_bytes } else { None })
        .unwrap_or(cfg.carried_buffer);
    let ul_data_snr_db = mean(
        uplink
            .iter()
            .filter(|s| s.kind == PacketKind::Data)
            .filter_map(|s| s.snr_db),
    );
    let ul_ctrl_snr_db = mean(
        uplink
            .iter()
            .filter(|s| s.kind != PacketKind::Data)
            .filter_map(|s| s.snr_db),
    );
    let dl_snr = mean(
        window
            .iter()
            .filter(|s| s.direction == Direction::Downlink)
            .filter_map(|s| s.snr_db),
    );
    let cqi = dl_snr.map_or(0, |s| cqi_for_snr(s, cfg.threshold_db, cfg.clear_cqi));
    let mcs = cfg.mcs_pin.unwrap_or_else(|| mcs_for_cqi(cqi));
    let snr_db = mean(window.iter().filter_map(|s| s.snr_db)).unwrap_or(cfg.silent_snr_db);
    let stats = NodeStats {
        acks,
        nacks,
        per,
        bitrate_bps,
        buffer_bytes,
        phr,
        cqi,
        mcs,
        ul_data_snr_db,
        ul_ctrl_snr_db,
    };
    let metrics = LinkMetrics {
        snr_db,
        received_power_dbm: cfg.noise_floor_dbm + snr_db,
        per,
        timing_advance_us: None,
    };
    (stats, metrics)
}

impl MeasureConfig {
    pub fn for_channel(channel: &ChannelConfig) -> Self {
        MeasureConfig {
            threshold_db: channel.snr_decode_threshold_db,
            silent_snr_db: channel.silent_snr_db,
            noise_floor_dbm: channel.noise_floor_dbm(),
            ..MeasureConfig::default()
        }
    }
}

/// Uplink transmission the mobile has committed to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UplinkPlan {
    pub at_local: LocalTime,
    pub tti: u64,
    pub kind: PacketKind,
    pub packet_ns: i64,
    pub count: u32,
    pub data_bytes: u32,
    pub frequency: Option<FrequencyHz>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MobileAction {
    Transmit(UplinkPlan),
    Retune { at_local: LocalTime, command: RetuneCommand },
    TimingAcquired,
}

/// Mobile station behavior. It schedules on its own clock and reports
/// what it decoded.
#[derive(Debug, Clone)]
pub struct MobileStation {
    pub clock: ClockParams,
    pub radio: Radio,
    key: SessionKey,
    pub timing: Option<TimingCommand>,
    pub monitor: ConnectionMonitor,
    pub probe_response_ns: i64,
    pub buffer_bytes: u32,
    pending_reports: Vec<RxReport>,
    reserved: Vec<(u64, u64)>,
    decoded_ttis: BTreeSet<u64>,
    last_dl_snr: Option<f64>,
    pub retune_applied: Option<(RefTime, RetuneCommand)>,
}

impl MobileStation {
    pub fn new(clock: ClockParams, radio: Radio, key: SessionKey, disconnect_after: u32) -> Self {
        MobileStation {
            clock,
            radio,
            key,
            timing: None,
            monitor: ConnectionMonitor::new(disconnect_after),
            probe_response_ns: 500_000,
            buffer_bytes: DEFAULT_BUFFER_BYTES,
            pending_reports: Vec::new(),
            reserved: Vec::new(),
            decoded_ttis: BTreeSet::new(),
            last_dl_snr: None,
            retune_applied: None,
        }
    }

    pub fn local_now(&self, t: RefTime) -> LocalTime {
        local_of(&self.clock, t)
    }

    pub fn is_reserved(&self, tti: u64) -> bool {
        self.reserved.iter().any(|&(a, b)| (a..b).contains(&tti))
    }

    pub fn decoded_tti(&self, tti: u64) -> bool {
        self.decoded_ttis.contains(&tti)
    }

    /// Handles a decoded downlink packet whose first bit arrived at local
    /// time `rx_stamp`.
    pub fn on_decoded(
        &mut self,
        packet_id: u64,
        tti: u64,
        rx_stamp: LocalTime,
        snr_db: f64,
        payload: &Payload,
    ) -> Vec<MobileAction> {
        let mut actions = Vec::new();
        self.pending_reports.push(RxReport {
            packet_id,
            tti,
            rx_stamp,
            snr_db,
        });
        self.decoded_ttis.insert(tti);
        self.last_dl_snr = Some(snr_db);
        if let Some(r) = payload.reserved {
            self.reserved.push(r);
        }
        if let Some(t) = payload.timing {
            let first = self.timing.is_none();
            self.timing = Some(t);
            if first {
                actions.push(MobileAction::TimingAcquired);
            }
        }
        for g in payload.grants.iter().filter(|g| g.direction == Direction::Uplink) {
            let at_local = g.tx_local.unwrap_or_else(|| {
                rx_stamp + LocalTime::from_ticks(self.probe_response_ns as i128 * TICKS_PER_NANO)
            });
            actions.push(MobileAction::Transmit(UplinkPlan {
                at_local,
                tti: g.tti_index,
                kind: g.kind,
                packet_ns: g.packet_ns,
                count: g.duration_ttis,
                data_bytes: if g.kind == PacketKind::Data { bytes_for(g.packet_ns) } else { 0 },
                frequency: None,
            }));
        }
        if let Some(cmd) = payload.control.as_ref().and_then(|c| c.open(&self.key)) {
            if cmd.apply(self.radio, Station::Mobile) != self.radio {
                // switch just ahead of the first affected downlink
                let at_local = match self.timing {
                    Some(t) => t.arrival_local(tti_start(cmd.at_tti) - 100_000),
                    None => rx_stamp,
                };
                actions.push(MobileAction::Retune {
                    at_local,
                    command: cmd,
                });
            }
        }
        actions
    }

    pub fn apply_retune(&mut self, now: RefTime, cmd: RetuneCommand) {
        self.radio = cmd.apply(self.radio, Station::Mobile);
        self.retune_applied = Some((now, cmd));
    }

    /// Builds the payload of an uplink packet sent at local `stamp`.
    pub fn uplink_payload(&mut self, stamp: LocalTime, data_bytes: u32) -> Payload {
        Payload {
            data_bytes,
            mobile_stamp: Some(stamp),
            reports: std::mem::take(&mut self.pending_reports),
            dl_snr_db: self.last_dl_snr,
            buffer_bytes: Some(self.buffer_bytes),
            ..Payload::default()
        }
    }
}

/// Payload size of a data packet of the given length at the test MCS.
pub fn bytes_for(packet_ns: i64) -> u32 {
    // about 1.7 kbit per 1 ms TTI
    (packet_ns.max(0) as u64 * 215 / TTI_NS as u64) as u32
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DlRecord {
    pub packet_id: u64,
    pub tti: u64,
    pub kind: PacketKind,
    pub sent_at: RefTime,
    pub duration_ns: i64,
    pub probe: bool,
    pub report: Option<RxReport>,
}

/// Uplink transmission the base expects, with its receive window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpectedUplink {
    pub slot: u64,
    pub tti: u64,
    pub kind: PacketKind,
    pub tx_local: Option<LocalTime>,
    pub window: (RefTime, RefTime),
    pub normal: bool,
    pub energy: bool,
    pub outcome: Option<SlotOutcome>,
    pub packet_id: Option<u64>,
    pub rx_start: Option<RefTime>,
}

/// Base-station bookkeeping. The reference clock lives here.
#[derive(Debug, Clone)]
pub struct BaseStation {
    pub radio: Radio,
    key: SessionKey,
    pub records: Vec<ExchangeRecord>,
    pub dl: BTreeMap<u64, DlRecord>,
    pub ul: BTreeMap<u64, ExpectedUplink>,
    pub monitor: ConnectionMonitor,
    pub reserved: Vec<(u64, u64)>,
    pub ul_ack_queue: Vec<u64>,
    pub last_dl_snr: Option<f64>,
    pub last_buffer: u32,
    next_slot: u64,
}

impl BaseStation {
    pub fn new(radio: Radio, key: SessionKey, disconnect_after: u32) -> Self {
        BaseStation {
            radio,
            key,
            records: Vec::new(),
            dl: BTreeMap::new(),
            ul: BTreeMap::new(),
            monitor: ConnectionMonitor::new(disconnect_after),
            reserved: Vec::new(),
            ul_ack_queue: Vec::new(),
            last_dl_snr: None,
            last_buffer: DEFAULT_BUFFER_BYTES,
            next_slot: 0,
        }
    }

    pub fn key(&self) -> &SessionKey {
        &self.key
    }

    pub fn is_reserved(&self, tti: u64) -> bool {
        self.reserved.iter().any(|&(a, b)| (a..b).contains(&tti))
    }

    pub fn expect_uplink(
        &mut self,
        tti: u64,
        kind: PacketKind,
        tx_local: Option<LocalTime>,
        window: (RefTime, RefTime),
        normal: bool,
    ) -> u64 {
        let slot = self.next_slot;
        self.next_slot += 1;
        self.ul.insert(
            slot,
            ExpectedUplink {
                slot,
                tti,
                kind,
                tx_local,
                window,
                normal,
                energy: false,
                outcome: None,
                packet_id: None,
                rx_start: None,
            },
        );
        slot
    }

    /// Handles a decoded uplink packet.
    pub fn on_uplink(
        &mut self,
        packet_id: u64,
        tti: u64,
        kind: PacketKind,
        rx_start: RefTime,
        payload: &Payload,
        probe: bool,
    ) {
        for r in &payload.reports {
            if let Some(d) = self.dl.get_mut(&r.packet_id) {
                if d.report.is_none() {
                    d.report = Some(*r);
                    if d.probe {
                        self.records.push(ExchangeRecord {
                            packet_id: d.packet_id,
                            direction: Direction::Downlink,
                            base_stamp: d.sent_at,
                            mobile_stamp: r.rx_stamp,
                        });
                    }
                }
            }
        }
        if probe {
            if let Some(s_m) = payload.mobile_stamp {
                self.records.push(ExchangeRecord {
                    packet_id,
                    direction: Direction::Uplink,
                    base_stamp: rx_start,
                    mobile_stamp: s_m,
                });
            }
        }
        if let Some(s) = payload.dl_snr_db {
            self.last_dl_snr = Some(s);
        }
        if let Some(b) = payload.buffer_bytes {
            self.last_buffer = b;
        }
        self.ul_ack_queue.push(packet_id);
        let slot = self
            .ul
            .values_mut()
            .find(|s| s.tti == tti && s.kind == kind && s.packet_id.is_none());
        if let Some(s) = slot {
            s.packet_id = Some(packet_id);
            s.rx_start = Some(rx_start);
        }
    }

    /// Records energy of any kind overlapping expected windows.
    pub fn on_energy(&mut self, start: RefTime, end: RefTime) {
        for s in self.ul.values_mut().filter(|s| s.outcome.is_none()) {
            if start < s.window.1 && s.window.0 < end {
                s.energy = true;
            }
        }
    }

    /// Closes an expected slot with the SNR drawn for its regime.
    pub fn close_slot(&mut self, slot: u64, snr_for: impl FnOnce(ReceptionClass) -> f64) -> Option<SlotOutcome> {
        let last_buffer = self.last_buffer;
        let s = self.ul.get_mut(&slot)?;
        let class = if s.packet_id.is_some() {
            ReceptionClass::Clear
        } else if s.energy {
            ReceptionClass::Collided
        } else {
            ReceptionClass::Silent
        };
        let out = SlotOutcome {
            tti: s.tti,
            direction: Direction::Uplink,
            kind: s.kind,
            class: Some(class),
            snr_db: Some(snr_for(class)),
            delivered: s.packet_id.is_some(),
            bytes: if s.kind == PacketKind::Data { bytes_for(s.window.1 - s.window.0) } else { 0 },
            buffer_bytes: s.packet_id.map(|_| last_buffer),
        };
        s.outcome = Some(out);
        Some(out)
    }

    /// Downlink outcomes of data and grant packets sent in `ttis`, judged
    /// by the mobile's reports so far.
    pub fn downlink_outcomes(&self, ttis: std::ops::Range<u64>) -> Vec<SlotOutcome> {
        self.dl
            .values()
            .filter(|d| ttis.contains(&d.tti) && !d.probe)
            .map(|d| SlotOutcome {
                tti: d.tti,
                direction: Direction::Downlink,
                kind: d.kind,
                class: None,
                snr_db: d.report.map(|r| r.snr_db),
                delivered: d.report.is_some(),
                bytes: if d.kind == PacketKind::Data { bytes_for(d.duration_ns) } else { 0 },
                buffer_bytes: None,
            })
            .collect()
    }

    pub fn uplink_outcomes(&self, ttis: std::ops::Range<u64>) -> Vec<SlotOutcome> {
        self.ul
            .values()
            .filter(|s| ttis.contains(&s.tti))
            .filter_map(|s| s.outcome)
            .collect()
    }

    pub fn downlink_payload(&mut self, stamp: RefTime) -> Payload {
        Payload {
            base_stamp: Some(stamp),
            ul_acks: std::mem::take(&mut self.ul_ack_queue),
            ..Payload::default()
        }
    }

    pub fn apply_retune(&mut self, cmd: RetuneCommand) {
        self.radio = cmd.apply(self.radio, Station::Base);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(mhz: u64) -> FrequencyHz {
        FrequencyHz::from_mhz(mhz)
    }

    #[test]
    fn grant_covers_requested_ttis() {
        let g = schedule_grant(10, Direction::Downlink, 12, 3, f(2400), &[f(2400)]).unwrap();
        assert_eq!(g.ttis(), 12..15);
        let burst = schedule_grant(10, Direction::Downlink, 12, 5, f(2400), &[f(2400)]).unwrap();
        assert_eq!(burst.duration_ttis as i64 * burst.packet_ns, 5 * TTI_NS);
    }

    #[test]
    fn grant_errors() {
        assert_eq!(
            schedule_grant(10, Direction::Uplink, 10, 1, f(2400), &[f(2400)]),
            Err(GrantError::NotFuture { tti: 10, now: 10 })
        );
        assert_eq!(
            schedule_grant(10, Direction::Uplink, 11, 0, f(2400), &[f(2400)]),
            Err(GrantError::ZeroDuration)
        );
        assert_eq!(
            schedule_grant(10, Direction::Uplink, 11, 1, f(2450), &[f(2400)]),
            Err(GrantError::OffPlan(f(2450)))
        );
    }

    #[test]
    fn monitor_disconnects_after_threshold() {
        let mut m = ConnectionMonitor::new(3);
        assert_eq!(m.state().rrc, Rrc::Idle);
        assert!(m.observe(RefTime::from_nanos(1), false).is_none());
        m.attach(RefTime::from_nanos(2));
        assert_eq!(m.state().rrc, Rrc::Connected);
        m.observe(RefTime::from_nanos(3), false);
        m.observe(RefTime::from_nanos(4), true);
        m.observe(RefTime::from_nanos(5), false);
        m.observe(RefTime::from_nanos(6), false);
        assert_eq!(m.state().rrc, Rrc::Connected);
        let s = m.observe(RefTime::from_nanos(7), false).unwrap();
        assert_eq!(s.rrc, Rrc::Disconnected);
        assert_eq!(s.since, RefTime::from_nanos(7));
        // final
        m.observe(RefTime::from_nanos(8), true);
        assert_eq!(m.state().rrc, Rrc::Disconnected);
        assert_eq!(m.history().len(), 3);
    }

    #[test]
    fn encrypted_control_needs_key() {
        let key = SessionKey::derive(1);
        let p = retune(f(2600), RetuneWhich::Downlink, 900, &key);
        let c = p.control.unwrap();
        assert_eq!(c.open(&key).unwrap().target, f(2600));
        assert!(c.open(&SessionKey::derive(2)).is_none());
    }

    #[test]
    fn retune_moves_matching_radios() {
        let plan = FrequencyPlan::default();
        let cmd = RetuneCommand {
            target: f(2600),
            which: RetuneWhich::Downlink,
            at_tti: 5,
        };
        let b = cmd.apply(plan.base_radio(), Station::Base);
        let m = cmd.apply(plan.mobile_radio(), Station::Mobile);
        assert_eq!((b.tx, b.rx), (f(2600), f(2500)));
        assert_eq!((m.tx, m.rx), (f(2500), f(2600)));
        let both = RetuneCommand {
            which: RetuneWhich::Both,
            ..cmd
        };
        let m = both.apply(plan.mobile_radio(), Station::Mobile);
        assert_eq!((m.tx, m.rx), (f(2700), f(2600)));
        // retune to the current carrier changes nothing
        let same = RetuneCommand { target: f(2400), ..cmd };
        assert_eq!(same.apply(plan.base_radio(), Station::Base), plan.base_radio());
    }

    fn slot(dir: Direction, kind: PacketKind, delivered: bool, snr: f64) -> SlotOutcome {
        SlotOutcome {
            tti: 0,
            direction: dir,
            kind,
            class: None,
            snr_db: Some(snr),
            delivered,
            bytes: 215,
            buffer_bytes: delivered.then_some(100),
        }
    }

    #[test]
    fn measure_uplink_failure_window() {
        let mut w: Vec<SlotOutcome> = (0..11).map(|_| slot(Direction::Uplink, PacketKind::Data, false, 1.0)).collect();
        w.push(slot(Direction::Uplink, PacketKind::Ack, true, 18.0));
        let cfg = MeasureConfig {
            mcs_pin: Some(1),
            ..Default::default()
        };
        let (s, m) = measure(&w, 12 * TTI_NS, &cfg);
        assert_eq!((s.acks, s.nacks), (0, 11));
        assert_eq!(s.per, 1.0);
        assert_eq!(s.ul_data_snr_db, Some(1.0));
        assert_eq!(s.ul_ctrl_snr_db, Some(18.0));
        assert_eq!(s.mcs, 1);
        assert_eq!(s.buffer_bytes, 100);
        assert_eq!(s.bitrate_bps, 0.0);
        assert_eq!(m.per, 1.0);
    }

    #[test]
    fn measure_phr_rule_and_buffer_carry() {
        let w = vec![slot(Direction::Uplink, PacketKind::Data, false, 1.0)];
        let (s, _) = measure(&w, TTI_NS, &MeasureConfig::default());
        assert_eq!(s.phr, 0);
        assert_eq!(s.buffer_bytes, DEFAULT_BUFFER_BYTES);
        let w = vec![slot(Direction::Uplink, PacketKind::Data, true, 18.0)];
        let (s, _) = measure(&w, TTI_NS, &MeasureConfig::default());
        assert_eq!(s.phr, 40);
    }

    #[test]
    fn clean_link_reaches_top_mcs() {
        let w: Vec<SlotOutcome> = (0..4).map(|_| slot(Direction::Downlink, PacketKind::Data, true, 18.0)).collect();
        let (s, _) = measure(&w, 4 * TTI_NS, &MeasureConfig::default());
        assert_eq!(s.per, 0.0);
        assert_eq!(s.cqi, 15);
        assert_eq!(s.mcs, 28);
        assert!((s.bitrate_bps - 4.0 * 215.0 * 8.0 / 0.004).abs() < 1e-6);
    }

    #[test]
    fn lookup_ranges() {
        for cqi in 0..=20u8 {
            assert!(mcs_for_cqi(cqi) <= MAX_MCS);
        }
        assert_eq!(cqi_for_snr(-3.0, 10.0, 15), 0);
        assert_eq!(cqi_for_snr(1.0, 10.0, 15), 1);
        assert_eq!(cqi_for_snr(18.0, 10.0, 9), 9);
    }

    proptest::proptest! {
        #[test]
        fn per_bookkeeping_exact(outcomes in proptest::collection::vec(proptest::bool::ANY, 1..200)) {
            let w: Vec<SlotOutcome> = outcomes.iter().map(|&d| slot(Direction::Downlink, PacketKind::Data, d, 18.0)).collect();
            let (s, _) = measure(&w, TTI_NS, &MeasureConfig::default());
            let nacks = outcomes.iter().filter(|d| !**d).count() as u32;
            proptest::prop_assert_eq!(s.nacks, nacks);
            proptest::prop_assert_eq!(s.per, nacks as f64 / outcomes.len() as f64);
            proptest::prop_assert!(s.cqi <= MAX_CQI && s.mcs <= MAX_MCS && s.phr <= MAX_PHR);
        }
    }
}
