use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clock::{local_of, ref_of, LocalTime, RefTime, TICKS_PER_NANO};
use crate::endpoints::{
    tti_start, BaseStation, MobileAction, MobileStation, RetuneCommand, SessionKey, UplinkPlan, TTI_NS,
};
use crate::medium::{timing_advance, DeliveryOutcome, FrequencyHz, Medium, NodeId, Packet, PacketKind, ReceptionClass, TimingAdvance};
use crate::mim::{AirView, Hearing, Mim, MimAction, MimTimer};
use crate::reveal::DetectionVerdict;
use crate::sync::{Direction, SyncEstimate};

use super::scenario::{ConfigError, ScenarioConfig};
use super::trace::{Trace, TraceEvent};

/// Slack after an uplink window before the base judges the slot.
pub const SLOT_GUARD_NS: i64 = 20_000;
/// Offset of control packets inside their TTI, after any uplink has cleared.
pub const CONTROL_OFFSET_NS: i64 = 600_000;
/// The mobile judges a downlink TTI this long after its predicted arrival.
pub const MOBILE_CHECK_NS: i64 = 2 * TTI_NS;
pub const RECEPTION_HORIZON_NS: i64 = 20_000_000;

#[derive(Debug, Clone, PartialEq)]
pub(super) enum Event {
    Tti(u64),
    TxStart(usize),
    MimRxStart(usize),
    MimRxEnd(usize),
    RxEnd(usize),
    Mim(MimTimer),
    MobileSend(UplinkPlan, u32),
    MobileRetune(RetuneCommand),
    MobileCheck(u64),
    SlotClose(u64),
}

#[derive(Debug, Clone)]
pub struct Transmission {
    pub packet: Packet,
    pub forwarded: bool,
    pub corrupted: bool,
    pub aborted: bool,
    pub started: bool,
    pub cancelled: bool,
}

#[derive(Debug, Clone, Copy)]
pub(super) struct Rx {
    pub tx: usize,
    pub node: NodeId,
    pub start: RefTime,
    pub end: RefTime,
    pub frequency: FrequencyHz,
}

/// What one station actually experienced for one reception.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Receipt {
    pub packet_id: u64,
    pub tti: u64,
    pub kind: PacketKind,
    pub direction: Direction,
    pub sent_at: RefTime,
    pub duration_ns: i64,
    pub rx_start: RefTime,
    /// Local receive stamp; mobile receptions only.
    pub stamp: Option<LocalTime>,
    pub class: ReceptionClass,
    pub snr_db: f64,
    pub decoded: bool,
}

pub(super) struct Pending {
    pub tti: u64,
    pub id: u64,
    pub kind: PacketKind,
    pub payload: crate::endpoints::Payload,
}

pub(super) struct ScheduledDl {
    pub id: u64,
    pub offset_ns: i64,
    pub packet_ns: i64,
    pub kind: PacketKind,
}

/// Deterministic event-driven run of one scenario.
pub struct Simulation {
    pub(super) cfg: ScenarioConfig,
    pub(super) medium: Medium,
    pub(super) mim: Option<Mim>,
    pub(super) base: BaseStation,
    pub(super) mobile: MobileStation,
    pub(super) rng: ChaCha8Rng,
    pub(super) now: RefTime,
    pub(super) next_tick: u64,
    pub(super) queue: BTreeMap<(RefTime, u64), Event>,
    pub(super) seq: u64,
    pub(super) txs: Vec<Transmission>,
    pub(super) rxs: Vec<Rx>,
    pub(super) recent: [Vec<usize>; 2],
    pub(super) next_packet: u64,
    pub(super) order_to_tx: HashMap<u64, usize>,
    pub(super) scheduled_dl: BTreeMap<u64, Vec<ScheduledDl>>,
    pub(super) control: Vec<Pending>,
    pub(super) sync: Option<SyncEstimate>,
    pub(super) ta: Option<TimingAdvance>,
    pub(super) attach_end: u64,
    pub(super) base_retune: Option<RetuneCommand>,
    pub(super) ul_quality: Vec<(u64, f64)>,
    pub(super) trace: Trace,
    pub(super) verdicts: Vec<DetectionVerdict>,
    pub(super) mobile_receipts: Vec<Receipt>,
    pub(super) base_receipts: Vec<Receipt>,
}

impl Simulation {
    pub fn new(cfg: ScenarioConfig, keep_trace: bool) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let clock = cfg.clock_params().expect("validated clock");
        let key = SessionKey::derive(cfg.seed);
        let mim = cfg.mim.clone().map(|m| Mim::new(m).expect("validated relay"));
        let mut mobile = MobileStation::new(clock, cfg.plan.mobile_radio(), key.clone(), cfg.traffic.disconnect_after);
        mobile.probe_response_ns = TTI_NS / 2;
        let base = BaseStation::new(cfg.plan.base_radio(), key, cfg.traffic.disconnect_after);
        let mut sim = Simulation {
            medium: Medium::new(cfg.channel.clone(), cfg.reach),
            mim,
            base,
            mobile,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            now: RefTime::ZERO,
            next_tick: 0,
            queue: BTreeMap::new(),
            seq: 0,
            txs: Vec::new(),
            rxs: Vec::new(),
            recent: [Vec::new(), Vec::new()],
            next_packet: 1,
            order_to_tx: HashMap::new(),
            scheduled_dl: BTreeMap::new(),
            control: Vec::new(),
            sync: None,
            ta: None,
            attach_end: 2 * cfg.traffic.attach_probes,
            base_retune: None,
            ul_quality: Vec::new(),
            trace: Trace::new(keep_trace),
            verdicts: Vec::new(),
            mobile_receipts: Vec::new(),
            base_receipts: Vec::new(),
            cfg,
        };
        sim.push(tti_start(0), Event::Tti(0));
        Ok(sim)
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn now(&self) -> RefTime {
        self.now
    }

    pub fn mim(&self) -> Option<&Mim> {
        self.mim.as_ref()
    }

    pub fn mobile(&self) -> &MobileStation {
        &self.mobile
    }

    pub fn base(&self) -> &BaseStation {
        &self.base
    }

    pub fn transmissions(&self) -> &[Transmission] {
        &self.txs
    }

    /// Every reception at the mobile, decoded or not.
    pub fn mobile_receipts(&self) -> &[Receipt] {
        &self.mobile_receipts
    }

    pub fn base_receipts(&self) -> &[Receipt] {
        &self.base_receipts
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn verdicts(&self) -> &[DetectionVerdict] {
        &self.verdicts
    }

    pub fn timing_advance(&self) -> Option<TimingAdvance> {
        self.ta
    }

    pub(super) fn push(&mut self, at: RefTime, ev: Event) {
        assert!(at >= self.now, "event scheduled before the current time");
        self.queue.insert((at, self.seq), ev);
        self.seq += 1;
    }

    pub(super) fn alloc_packet(&mut self) -> u64 {
        let id = self.next_packet;
        self.next_packet += 1;
        id
    }

    /// Processes all events before `tti` starts. The tick of `tti` itself
    /// stays queued.
    pub fn advance_to(&mut self, tti: u64) {
        let limit = tti_start(tti);
        while let Some(entry) = self.queue.first_entry() {
            if entry.key().0 >= limit {
                break;
            }
            let ((at, _), ev) = entry.remove_entry();
            self.now = at;
            self.handle(ev);
        }
        self.next_tick = self.next_tick.max(tti);
    }

    /// Runs to the configured end of the scenario.
    pub fn finish_run(&mut self) {
        let end = self.cfg.run_ttis;
        if self.next_tick < end {
            self.advance_to(end);
        }
    }

    fn handle(&mut self, ev: Event) {
        match ev {
            Event::Tti(k) => self.on_tick(k),
            Event::TxStart(tx) => self.on_tx_start(tx),
            Event::MimRxStart(tx) => self.on_mim_rx_start(tx),
            Event::MimRxEnd(tx) => {
                let acts = self.mim.as_mut().map(|m| m.on_rx_end(self.now, tx as u64)).unwrap_or_default();
                self.apply_mim(acts);
            }
            Event::RxEnd(rx) => self.on_rx_end(rx),
            Event::Mim(timer) => {
                let acts = self.mim.as_mut().map(|m| m.on_timer(self.now, timer)).unwrap_or_default();
                self.apply_mim(acts);
            }
            Event::MobileSend(plan, i) => self.on_mobile_send(plan, i),
            Event::MobileRetune(cmd) => {
                self.mobile.apply_retune(self.now, cmd);
                let r = self.mobile.radio;
                self.trace.record(TraceEvent::Retune {
                    t: self.now,
                    node: NodeId::Mobile,
                    tx_mhz: r.tx.hz() / 1_000_000,
                    rx_mhz: r.rx.hz() / 1_000_000,
                });
            }
            Event::MobileCheck(k) => self.on_mobile_check(k),
            Event::SlotClose(slot) => self.on_slot_close(slot),
        }
    }

    pub(super) fn transmit(&mut self, packet: Packet, forwarded: bool, corrupted: bool) -> usize {
        let at = packet.tx_start;
        let idx = self.txs.len();
        self.txs.push(Transmission {
            packet,
            forwarded,
            corrupted,
            aborted: false,
            started: false,
            cancelled: false,
        });
        self.push(at, Event::TxStart(idx));
        idx
    }

    fn on_tx_start(&mut self, idx: usize) {
        if self.txs[idx].cancelled {
            return;
        }
        self.txs[idx].started = true;
        let p = self.txs[idx].packet.clone();
        self.trace.record(TraceEvent::Tx {
            t: self.now,
            tx: idx,
            packet: p.id,
            src: p.src,
            dir: p.direction,
            kind: p.kind,
            mhz: p.frequency.hz() / 1_000_000,
            dur_ns: p.duration_ns,
            tti: p.tti,
            forwarded: self.txs[idx].forwarded,
        });
        let listeners: Vec<(NodeId, FrequencyHz)> = match p.src {
            NodeId::Base => vec![(NodeId::Mobile, self.mobile.radio.rx)],
            NodeId::Mobile => vec![(NodeId::Base, self.base.radio.rx)],
            NodeId::Mim => vec![(NodeId::Base, self.base.radio.rx), (NodeId::Mobile, self.mobile.radio.rx)],
        };
        for out in self.medium.deliver(&p, &listeners) {
            if let DeliveryOutcome::Delivered { node, rx_start, rx_end } = out {
                let rx = self.rxs.len();
                self.rxs.push(Rx {
                    tx: idx,
                    node,
                    start: rx_start,
                    end: rx_end,
                    frequency: p.frequency,
                });
                let slot = node_slot(node);
                self.recent[slot].push(rx);
                self.push(rx_end, Event::RxEnd(rx));
            }
        }
        if p.src != NodeId::Mim {
            if let Some(m) = self.mim.as_mut() {
                let view = AirView::of(&p);
                let at = p.tx_start + self.medium.prop_delay_ns(p.src, NodeId::Mim);
                match m.hearing(&view) {
                    Hearing::Listen => {
                        self.push(at, Event::MimRxStart(idx));
                        self.push(at + p.duration_ns, Event::MimRxEnd(idx));
                    }
                    Hearing::NotSensed => {
                        let act = m.log_not_sensed(&view, at);
                        self.apply_mim(vec![act]);
                    }
                    Hearing::Ignore => {}
                }
            }
        }
    }

    fn on_mim_rx_start(&mut self, idx: usize) {
        let p = &self.txs[idx].packet;
        let view = AirView::of(p);
        let end = self.now + p.duration_ns;
        let acts = match self.mim.as_mut() {
            Some(m) => m.on_rx_start(self.now, idx as u64, view, end),
            None => return,
        };
        self.apply_mim(acts);
    }

    fn apply_mim(&mut self, acts: Vec<MimAction>) {
        for a in acts {
            match a {
                MimAction::Timer { at, timer } => self.push(at, Event::Mim(timer)),
                MimAction::Forward {
                    order,
                    rx_id,
                    frequency,
                    start,
                    corrupted,
                } => {
                    let src = &self.txs[rx_id as usize];
                    let mut p = src.packet.clone();
                    let corrupted = corrupted || src.corrupted;
                    p.src = NodeId::Mim;
                    p.frequency = frequency;
                    p.tx_start = start;
                    let tx = self.transmit(p, true, corrupted);
                    self.order_to_tx.insert(order, tx);
                }
                MimAction::Abort { order } => {
                    if let Some(&tx) = self.order_to_tx.get(&order) {
                        let t = &mut self.txs[tx];
                        t.aborted = true;
                        if t.started {
                            t.corrupted = true;
                        } else {
                            t.cancelled = true;
                        }
                        self.trace.record(TraceEvent::Abort { t: self.now, tx });
                    }
                }
                MimAction::Corrupt { order } => {
                    if let Some(&tx) = self.order_to_tx.get(&order) {
                        self.txs[tx].corrupted = true;
                    }
                }
                MimAction::Dropped(d) => self.trace.record(TraceEvent::MimDrop {
                    t: self.now,
                    at: d.at,
                    packet: d.packet_id,
                    dir: d.direction,
                    reason: d.reason,
                }),
            }
        }
    }

    pub(super) fn jitter_db(&mut self) -> f64 {
        let j = self.cfg.channel.snr_jitter_db;
        if j > 0.0 {
            self.rng.gen_range(-j..=j)
        } else {
            0.0
        }
    }

    pub(super) fn snr_for(&mut self, class: ReceptionClass) -> f64 {
        let c = &self.cfg.channel;
        let base = match class {
            ReceptionClass::Clear => c.clear_snr_db,
            ReceptionClass::Collided => c.collision_snr_db,
            ReceptionClass::Silent => c.silent_snr_db,
        };
        base + self.jitter_db()
    }

    fn classify(&mut self, rx: usize) -> ReceptionClass {
        let r = self.rxs[rx];
        let slot = node_slot(r.node);
        let horizon = self.now - RECEPTION_HORIZON_NS;
        let rxs = &self.rxs;
        let txs = &self.txs;
        self.recent[slot].retain(|&i| rxs[i].end > horizon);
        let hit = self.txs[r.tx].corrupted
            || self.recent[slot].iter().any(|&i| {
                let o = rxs[i];
                i != rx
                    && !txs[o.tx].cancelled
                    && o.frequency == r.frequency
                    && o.start < r.end
                    && r.start < o.end
            });
        if hit {
            ReceptionClass::Collided
        } else {
            ReceptionClass::Clear
        }
    }

    fn on_rx_end(&mut self, rx: usize) {
        let r = self.rxs[rx];
        if self.txs[r.tx].cancelled {
            return;
        }
        let class = self.classify(rx);
        let snr = self.snr_for(class);
        let p = self.txs[r.tx].packet.clone();
        let own_dir = match r.node {
            NodeId::Base => Direction::Uplink,
            _ => Direction::Downlink,
        };
        let decoded =
            class == ReceptionClass::Clear && snr >= self.cfg.channel.snr_decode_threshold_db && p.direction == own_dir;
        self.trace.record(TraceEvent::Rx {
            t: self.now,
            tx: r.tx,
            packet: p.id,
            node: r.node,
            start: r.start,
            class,
            snr_db: snr,
            decoded,
        });
        let base_sent = self.base.dl.get(&p.id).map(|d| d.sent_at).unwrap_or(p.tx_start);
        match r.node {
            NodeId::Base => {
                self.base.on_energy(r.start, r.end);
                self.base_receipts.push(Receipt {
                    packet_id: p.id,
                    tti: p.tti,
                    kind: p.kind,
                    direction: p.direction,
                    sent_at: p.tx_start,
                    duration_ns: p.duration_ns,
                    rx_start: r.start,
                    stamp: None,
                    class,
                    snr_db: snr,
                    decoded,
                });
                if decoded {
                    let probe = p.tti < self.attach_end;
                    self.base.on_uplink(p.id, p.tti, p.kind, r.start, &p.payload, probe);
                }
            }
            NodeId::Mobile => {
                let stamp = self.mobile_stamp(r.start);
                self.mobile_receipts.push(Receipt {
                    packet_id: p.id,
                    tti: p.tti,
                    kind: p.kind,
                    direction: p.direction,
                    sent_at: base_sent,
                    duration_ns: p.duration_ns,
                    rx_start: r.start,
                    stamp: Some(stamp),
                    class,
                    snr_db: snr,
                    decoded,
                });
                if decoded {
                    let acts = self.mobile.on_decoded(p.id, p.tti, stamp, snr, &p.payload);
                    self.apply_mobile(acts);
                }
            }
            NodeId::Mim => {}
        }
    }

    /// Local receive stamp with optional jitter.
    fn mobile_stamp(&mut self, at: RefTime) -> LocalTime {
        let exact = local_of(&self.mobile.clock, at);
        let j = self.cfg.traffic.stamp_jitter_ns;
        if j > 0 {
            let d: i64 = self.rng.gen_range(-j..=j);
            exact + LocalTime::from_ticks(d as i128 * TICKS_PER_NANO)
        } else {
            exact
        }
    }

    fn apply_mobile(&mut self, acts: Vec<MobileAction>) {
        for a in acts {
            match a {
                MobileAction::Transmit(plan) => {
                    let first = ref_of(&self.mobile.clock, plan.at_local);
                    if first < self.now {
                        self.trace.record(TraceEvent::MissedGrant {
                            t: self.now,
                            tti: plan.tti,
                        });
                        continue;
                    }
                    for i in 0..plan.count.max(1) {
                        self.push(first + i as i64 * plan.packet_ns, Event::MobileSend(plan, i));
                    }
                }
                MobileAction::Retune { at_local, command } => {
                    let at = ref_of(&self.mobile.clock, at_local).max(self.now);
                    self.push(at, Event::MobileRetune(command));
                }
                MobileAction::TimingAcquired => {
                    if let Some(s) = self.mobile.monitor.attach(self.now) {
                        self.trace.record(TraceEvent::Rrc {
                            t: self.now,
                            node: NodeId::Mobile,
                            state: s.rrc,
                        });
                    }
                }
            }
        }
    }

    fn on_mobile_send(&mut self, plan: UplinkPlan, i: u32) {
        let stamp = local_of(&self.mobile.clock, self.now);
        let payload = self.mobile.uplink_payload(stamp, plan.data_bytes);
        let id = self.alloc_packet();
        let p = Packet {
            id,
            src: NodeId::Mobile,
            dst: NodeId::Base,
            direction: Direction::Uplink,
            frequency: plan.frequency.unwrap_or(self.mobile.radio.tx),
            tx_start: self.now,
            duration_ns: plan.packet_ns,
            kind: plan.kind,
            payload_bytes: plan.data_bytes,
            tti: plan.tti + i as u64,
            payload,
        };
        self.transmit(p, false, false);
    }

    /// Round trip implied by the sync estimate, in reference nanoseconds.
    pub(super) fn round_trip_ns(sync: &SyncEstimate) -> i64 {
        let ticks = (sync.combined_down - sync.combined_up).ticks();
        let skew = sync.skew_hat.as_f64();
        (ticks as f64 / TICKS_PER_NANO as f64 / skew).round() as i64
    }

    pub(super) fn set_timing_advance(&mut self, sync: &SyncEstimate) {
        let rtt = Self::round_trip_ns(sync);
        self.ta = (rtt >= 0).then(|| timing_advance(rtt));
    }
}

fn node_slot(node: NodeId) -> usize {
    match node {
        NodeId::Base => 0,
        _ => 1,
    }
}
