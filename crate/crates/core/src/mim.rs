//! Relay adversaries with half-duplex, full-duplex and double full-duplex
//! forwarding capability.
//!
//! A [`Mim`] never sees packet contents. The event loop hands it an
//! [`AirView`] for each transmission it can sense and carries out the
//! [`MimAction`]s it returns; forwarded copies are cloned verbatim by the
//! loop.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::RefTime;
use crate::medium::{FrequencyHz, Packet, PacketKind};
use crate::sync::Direction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MimMode {
    HalfDuplex,
    FullDuplex,
    DoubleFullDuplex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictPolicy {
    PreferDownlink,
    PreferUplink,
}

impl ConflictPolicy {
    pub fn preferred(self) -> Direction {
        match self {
            ConflictPolicy::PreferDownlink => Direction::Downlink,
            ConflictPolicy::PreferUplink => Direction::Uplink,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForwardRule {
    pub from_mhz: u64,
    pub to_mhz: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MimConfig {
    pub mode: MimMode,
    pub listen_mhz: Vec<u64>,
    pub forward: Vec<ForwardRule>,
    #[serde(default = "default_fwd_delay")]
    pub d_fwd_bm_ns: i64,
    #[serde(default = "default_fwd_delay")]
    pub d_fwd_mb_ns: i64,
    #[serde(default = "default_policy")]
    pub conflict_policy: ConflictPolicy,
    #[serde(default = "default_bw")]
    pub sensing_bandwidth_mhz: u64,
    /// Required for half duplex. For full duplex, restricts relaying to one
    /// direction; unset means the relay carries both, one at a time.
    #[serde(default)]
    pub attack_direction: Option<Direction>,
    #[serde(default)]
    pub processing_delay_ns: i64,
}

fn default_fwd_delay() -> i64 {
    4_700
}

fn default_policy() -> ConflictPolicy {
    ConflictPolicy::PreferDownlink
}

fn default_bw() -> u64 {
    20
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MimConfigError {
    #[error("half-duplex relay needs an attack_direction")]
    MissingAttackDirection,
    #[error("double full-duplex relay needs at least two listen frequencies")]
    SingleChain,
    #[error("listen frequency {0} MHz has no forward rule")]
    Unmapped(u64),
    #[error("forwarding delays must be non-negative")]
    NegativeDelay,
    #[error("frequencies must be positive")]
    ZeroFrequency,
    #[error("at least one listen frequency required")]
    NoListen,
}

impl MimConfig {
    pub fn validate(&self) -> Result<(), MimConfigError> {
        if self.listen_mhz.is_empty() {
            return Err(MimConfigError::NoListen);
        }
        if self.listen_mhz.contains(&0) || self.forward.iter().any(|r| r.from_mhz == 0 || r.to_mhz == 0) {
            return Err(MimConfigError::ZeroFrequency);
        }
        if self.mode == MimMode::HalfDuplex && self.attack_direction.is_none() {
            return Err(MimConfigError::MissingAttackDirection);
        }
        if self.mode == MimMode::DoubleFullDuplex && self.listen_mhz.len() < 2 {
            return Err(MimConfigError::SingleChain);
        }
        if self.d_fwd_bm_ns < 0 || self.d_fwd_mb_ns < 0 || self.processing_delay_ns < 0 {
            return Err(MimConfigError::NegativeDelay);
        }
        for &l in &self.listen_mhz {
            if !self.forward.iter().any(|r| r.from_mhz == l) {
                return Err(MimConfigError::Unmapped(l));
            }
        }
        Ok(())
    }

    fn fwd_delay(&self, dir: Direction) -> i64 {
        match dir {
            Direction::Downlink => self.d_fwd_bm_ns,
            Direction::Uplink => self.d_fwd_mb_ns,
        }
    }

    fn relays(&self, dir: Direction) -> bool {
        self.attack_direction.map_or(true, |d| d == dir)
    }

    fn is_output(&self, f: FrequencyHz) -> bool {
        self.forward.iter().any(|r| FrequencyHz::from_mhz(r.to_mhz) == f)
    }

    fn sensed(&self, f: FrequencyHz) -> bool {
        let bw = self.sensing_bandwidth_mhz * 1_000_000;
        self.listen_mhz
            .iter()
            .any(|&l| FrequencyHz::from_mhz(l).distance(f) <= bw)
    }

    /// Output frequency for a sensed input. Carriers found inside the
    /// sensing band but outside the static plan are repeated in place.
    pub fn output_for(&self, f: FrequencyHz) -> FrequencyHz {
        self.forward
            .iter()
            .find(|r| FrequencyHz::from_mhz(r.from_mhz) == f)
            .map(|r| FrequencyHz::from_mhz(r.to_mhz))
            .unwrap_or(f)
    }
}

/// What the adversary can observe about a transmission. Deliberately has
/// no payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AirView {
    pub packet_id: u64,
    pub tti: u64,
    pub direction: Direction,
    pub frequency: FrequencyHz,
    pub duration_ns: i64,
    pub kind: PacketKind,
}

impl AirView {
    pub fn of(p: &Packet) -> Self {
        AirView {
            packet_id: p.id,
            tti: p.tti,
            direction: p.direction,
            frequency: p.frequency,
            duration_ns: p.duration_ns,
            kind: p.kind,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hearing {
    Listen,
    NotSensed,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    ChainBusy,
    Conflict,
    NotSensed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropEntry {
    pub packet_id: u64,
    pub tti: u64,
    pub direction: Direction,
    pub at: RefTime,
    pub reason: DropReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardEntry {
    pub packet_id: u64,
    pub direction: Direction,
    pub rx_start: RefTime,
    pub rx_end: RefTime,
    pub forward_start: RefTime,
    pub forward_end: RefTime,
    pub corrupted: bool,
    pub aborted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MimTimer {
    ForwardStart(u64),
    Drain,
}

/// Instructions to the event loop. `order` identifies a forwarded copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MimAction {
    Timer { at: RefTime, timer: MimTimer },
    Forward {
        order: u64,
        rx_id: u64,
        frequency: FrequencyHz,
        start: RefTime,
        corrupted: bool,
    },
    /// Stop a forwarded copy; receivers see a truncated, undecodable burst.
    Abort { order: u64 },
    /// The input of a forwarded copy turned out to be a collision.
    Corrupt { order: u64 },
    Dropped(DropEntry),
}

#[derive(Debug, Clone)]
struct RxState {
    view: AirView,
    start: RefTime,
    end: RefTime,
    collided: bool,
    dropped: bool,
    order: Option<u64>,
}

#[derive(Debug, Clone, Copy)]
struct ChainTx {
    order: u64,
    rx_id: u64,
    direction: Direction,
    end: RefTime,
}

/// Adversary-side ground truth. Detector code does not read this.
#[derive(Debug, Clone, Default)]
pub struct MimState {
    rx: BTreeMap<u64, RxState>,
    /// Cut-through chains, keyed by chain index (0 for single-chain).
    chains: BTreeMap<u8, ChainTx>,
    hd_queue: VecDeque<u64>,
    hd_busy_until: RefTime,
    next_order: u64,
    pub drops: Vec<DropEntry>,
    pub forwards: Vec<ForwardEntry>,
    order_to_forward: BTreeMap<u64, usize>,
}

impl MimState {
    pub fn busy_until(&self) -> RefTime {
        let chain_max = self.chains.values().map(|c| c.end).max().unwrap_or_default();
        chain_max.max(self.hd_busy_until)
    }

    pub fn queued(&self) -> usize {
        self.hd_queue.len()
    }
}

#[derive(Debug, Clone)]
pub struct Mim {
    pub config: MimConfig,
    pub state: MimState,
}

impl Mim {
    pub fn new(config: MimConfig) -> Result<Self, MimConfigError> {
        config.validate()?;
        Ok(Mim {
            config,
            state: MimState::default(),
        })
    }

    pub fn hearing(&self, view: &AirView) -> Hearing {
        if !self.config.relays(view.direction) || self.config.is_output(view.frequency) {
            return Hearing::Ignore;
        }
        if self.config.sensed(view.frequency) {
            Hearing::Listen
        } else {
            Hearing::NotSensed
        }
    }

    /// Records a transmission the adversary cannot sense.
    pub fn log_not_sensed(&mut self, view: &AirView, at: RefTime) -> MimAction {
        let entry = DropEntry {
            packet_id: view.packet_id,
            tti: view.tti,
            direction: view.direction,
            at,
            reason: DropReason::NotSensed,
        };
        self.state.drops.push(entry);
        MimAction::Dropped(entry)
    }

    fn chain_of(&self, dir: Direction) -> u8 {
        match (self.config.mode, dir) {
            (MimMode::DoubleFullDuplex, Direction::Uplink) => 1,
            _ => 0,
        }
    }

    fn drop(&mut self, rx_id: u64, at: RefTime, reason: DropReason) -> MimAction {
        let st = self.state.rx.get_mut(&rx_id).expect("known reception");
        st.dropped = true;
        let entry = DropEntry {
            packet_id: st.view.packet_id,
            tti: st.view.tti,
            direction: st.view.direction,
            at,
            reason,
        };
        self.state.drops.push(entry);
        MimAction::Dropped(entry)
    }

    fn begin_forward(&mut self, rx_id: u64, start: RefTime) -> (u64, MimAction) {
        let order = self.state.next_order;
        self.state.next_order += 1;
        let st = self.state.rx.get_mut(&rx_id).expect("known reception");
        st.order = Some(order);
        let frequency = self.config.output_for(st.view.frequency);
        let entry = ForwardEntry {
            packet_id: st.view.packet_id,
            direction: st.view.direction,
            rx_start: st.start,
            rx_end: st.end,
            forward_start: start,
            forward_end: start + st.view.duration_ns,
            corrupted: st.collided,
            aborted: false,
        };
        self.state.order_to_forward.insert(order, self.state.forwards.len());
        self.state.forwards.push(entry);
        (
            order,
            MimAction::Forward {
                order,
                rx_id,
                frequency,
                start,
                corrupted: st.collided,
            },
        )
    }

    /// First bit of a sensed transmission arrives.
    pub fn on_rx_start(
        &mut self,
        now: RefTime,
        rx_id: u64,
        view: AirView,
        end: RefTime,
    ) -> Vec<MimAction> {
        let mut actions = Vec::new();
        self.state.rx.insert(
            rx_id,
            RxState {
                view,
                start: now,
                end,
                collided: false,
                dropped: false,
                order: None,
            },
        );

        // same-frequency overlap: the receiver cannot separate the signals
        let overlapping: Vec<u64> = self
            .state
            .rx
            .iter()
            .filter(|(&id, s)| {
                id != rx_id && !s.dropped && s.view.frequency == view.frequency && s.end > now
            })
            .map(|(&id, _)| id)
            .collect();
        if !overlapping.is_empty() {
            for id in overlapping.iter().copied().chain(std::iter::once(rx_id)) {
                let st = self.state.rx.get_mut(&id).expect("known reception");
                st.collided = true;
                if let Some(order) = st.order {
                    if let Some(&i) = self.state.order_to_forward.get(&order) {
                        self.state.forwards[i].corrupted = true;
                    }
                    actions.push(MimAction::Corrupt { order });
                }
            }
        }

        match self.config.mode {
            MimMode::HalfDuplex => {
                if now < self.state.hd_busy_until {
                    actions.push(self.drop(rx_id, now, DropReason::ChainBusy));
                }
            }
            MimMode::FullDuplex | MimMode::DoubleFullDuplex => {
                let at = now + self.config.fwd_delay(view.direction);
                actions.push(MimAction::Timer {
                    at,
                    timer: MimTimer::ForwardStart(rx_id),
                });
            }
        }
        actions
    }

    /// Last bit of a sensed transmission arrives.
    pub fn on_rx_end(&mut self, now: RefTime, rx_id: u64) -> Vec<MimAction> {
        let Some(st) = self.state.rx.get(&rx_id) else {
            return Vec::new();
        };
        if self.config.mode != MimMode::HalfDuplex || st.dropped {
            return Vec::new();
        }
        self.state.hd_queue.push_back(rx_id);
        vec![MimAction::Timer {
            at: now + self.config.processing_delay_ns,
            timer: MimTimer::Drain,
        }]
    }

    pub fn on_timer(&mut self, now: RefTime, timer: MimTimer) -> Vec<MimAction> {
        match timer {
            MimTimer::ForwardStart(rx_id) => self.cut_through(now, rx_id),
            MimTimer::Drain => self.drain(now),
        }
    }

    fn cut_through(&mut self, now: RefTime, rx_id: u64) -> Vec<MimAction> {
        let Some(st) = self.state.rx.get(&rx_id) else {
            return Vec::new();
        };
        if st.dropped {
            return Vec::new();
        }
        let dir = st.view.direction;
        let chain = self.chain_of(dir);
        let mut actions = Vec::new();
        if let Some(cur) = self.state.chains.get(&chain).copied() {
            if cur.end > now {
                if cur.direction == dir {
                    actions.push(self.drop(rx_id, now, DropReason::ChainBusy));
                    return actions;
                }
                // both directions want the single transmit chain
                if self.config.conflict_policy.preferred() == dir {
                    actions.push(MimAction::Abort { order: cur.order });
                    if let Some(&i) = self.state.order_to_forward.get(&cur.order) {
                        self.state.forwards[i].aborted = true;
                        self.state.forwards[i].forward_end = now;
                    }
                    actions.push(self.drop(cur.rx_id, now, DropReason::Conflict));
                } else {
                    actions.push(self.drop(rx_id, now, DropReason::Conflict));
                    return actions;
                }
            }
        }
        let (order, fwd) = self.begin_forward(rx_id, now);
        actions.push(fwd);
        let end = now + self.state.rx[&rx_id].view.duration_ns;
        self.state.chains.insert(
            chain,
            ChainTx {
                order,
                rx_id,
                direction: dir,
                end,
            },
        );
        self.prune(now);
        actions
    }

    fn drain(&mut self, now: RefTime) -> Vec<MimAction> {
        let receiving = self
            .state
            .rx
            .values()
            .any(|s| !s.dropped && s.start <= now && s.end > now);
        if receiving || now < self.state.hd_busy_until || self.state.hd_queue.is_empty() {
            return Vec::new();
        }
        let mut actions = Vec::new();
        let mut t = now;
        while let Some(rx_id) = self.state.hd_queue.pop_front() {
            let (_, fwd) = self.begin_forward(rx_id, t);
            actions.push(fwd);
            t = t + self.state.rx[&rx_id].view.duration_ns;
        }
        self.state.hd_busy_until = t;
        actions.push(MimAction::Timer {
            at: t,
            timer: MimTimer::Drain,
        });
        self.prune(now);
        actions
    }

    fn prune(&mut self, now: RefTime) {
        // keep receptions that may still matter for overlap or pending work
        let horizon = now - 50_000_000;
        let queued: Vec<u64> = self.state.hd_queue.iter().copied().collect();
        self.state
            .rx
            .retain(|id, s| s.end > horizon || queued.contains(id));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn view(id: u64, dir: Direction, mhz: u64, dur: i64) -> AirView {
        AirView {
            packet_id: id,
            tti: id,
            direction: dir,
            frequency: FrequencyHz::from_mhz(mhz),
            duration_ns: dur,
            kind: PacketKind::Data,
        }
    }

    fn fd(policy: ConflictPolicy) -> Mim {
        Mim::new(MimConfig {
            mode: MimMode::FullDuplex,
            listen_mhz: vec![2400, 2480],
            forward: vec![
                ForwardRule { from_mhz: 2400, to_mhz: 2440 },
                ForwardRule { from_mhz: 2480, to_mhz: 2500 },
            ],
            d_fwd_bm_ns: 4_700,
            d_fwd_mb_ns: 4_700,
            conflict_policy: policy,
            sensing_bandwidth_mhz: 20,
            attack_direction: None,
            processing_delay_ns: 0,
        })
        .unwrap()
    }

    fn hd() -> Mim {
        Mim::new(MimConfig {
            mode: MimMode::HalfDuplex,
            listen_mhz: vec![2400],
            forward: vec![ForwardRule { from_mhz: 2400, to_mhz: 2440 }],
            d_fwd_bm_ns: 0,
            d_fwd_mb_ns: 0,
            conflict_policy: ConflictPolicy::PreferDownlink,
            sensing_bandwidth_mhz: 20,
            attack_direction: Some(Direction::Downlink),
            processing_delay_ns: 0,
        })
        .unwrap()
    }

    /// Replays actions' timers in time order, like the event loop would.
    fn run_timers(m: &mut Mim, mut pending: Vec<(RefTime, MimTimer)>, out: &mut Vec<MimAction>) {
        while !pending.is_empty() {
            pending.sort_by_key(|p| p.0);
            let (at, t) = pending.remove(0);
            for a in m.on_timer(at, t) {
                if let MimAction::Timer { at, timer } = a {
                    pending.push((at, timer));
                }
                out.push(a);
            }
        }
    }

    fn timers(actions: &[MimAction]) -> Vec<(RefTime, MimTimer)> {
        actions
            .iter()
            .filter_map(|a| match *a {
                MimAction::Timer { at, timer } => Some((at, timer)),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn lone_downlink_forwarded_after_constant_delay() {
        let mut m = fd(ConflictPolicy::PreferDownlink);
        let t0 = RefTime::from_nanos(250);
        let a = m.on_rx_start(t0, 0, view(1, Direction::Downlink, 2400, 500_000), t0 + 500_000);
        let mut out = Vec::new();
        run_timers(&mut m, timers(&a), &mut out);
        assert_eq!(
            out,
            vec![MimAction::Forward {
                order: 0,
                rx_id: 0,
                frequency: FrequencyHz::from_mhz(2440),
                start: t0 + 4_700,
                corrupted: false,
            }]
        );
    }

    fn simultaneous(policy: ConflictPolicy) -> Mim {
        let mut m = fd(policy);
        let t0 = RefTime::from_nanos(250);
        let mut pending = timers(&m.on_rx_start(t0, 0, view(1, Direction::Downlink, 2400, 500_000), t0 + 500_000));
        let t1 = t0 + 1_000;
        pending.extend(timers(&m.on_rx_start(t1, 1, view(2, Direction::Uplink, 2480, 500_000), t1 + 500_000)));
        let mut out = Vec::new();
        run_timers(&mut m, pending, &mut out);
        m
    }

    #[test]
    fn prefer_downlink_drops_uplink() {
        let m = simultaneous(ConflictPolicy::PreferDownlink);
        assert_eq!(m.state.drops.len(), 1);
        assert_eq!(m.state.drops[0].direction, Direction::Uplink);
        assert_eq!(m.state.drops[0].reason, DropReason::Conflict);
        let live: Vec<_> = m.state.forwards.iter().filter(|f| !f.aborted).collect();
        assert_eq!(live.len(), 1);
        assert_eq!(live[0].direction, Direction::Downlink);
    }

    #[test]
    fn prefer_uplink_preempts_downlink() {
        let m = simultaneous(ConflictPolicy::PreferUplink);
        assert_eq!(m.state.drops.len(), 1);
        assert_eq!(m.state.drops[0].direction, Direction::Downlink);
        let live: Vec<_> = m.state.forwards.iter().filter(|f| !f.aborted).collect();
        assert_eq!(live.len(), 1);
        assert_eq!(live[0].direction, Direction::Uplink);
    }

    #[test]
    fn double_full_duplex_forwards_both_concurrently() {
        let mut cfg = fd(ConflictPolicy::PreferDownlink).config;
        cfg.mode = MimMode::DoubleFullDuplex;
        let mut m = Mim::new(cfg).unwrap();
        let t0 = RefTime::from_nanos(250);
        let mut pending = timers(&m.on_rx_start(t0, 0, view(1, Direction::Downlink, 2400, 500_000), t0 + 500_000));
        pending.extend(timers(&m.on_rx_start(t0, 1, view(2, Direction::Uplink, 2480, 500_000), t0 + 500_000)));
        let mut out = Vec::new();
        run_timers(&mut m, pending, &mut out);
        assert!(m.state.drops.is_empty());
        let freqs: Vec<i64> = m.state.forwards.iter().map(|f| f.forward_start.nanos()).collect();
        assert_eq!(freqs, vec![4_950, 4_950]);
        let outs: Vec<FrequencyHz> = out
            .iter()
            .filter_map(|a| match a {
                MimAction::Forward { frequency, .. } => Some(*frequency),
                _ => None,
            })
            .collect();
        assert_eq!(outs, vec![FrequencyHz::from_mhz(2440), FrequencyHz::from_mhz(2500)]);
    }

    #[test]
    fn out_of_band_carrier_not_sensed() {
        let m = fd(ConflictPolicy::PreferDownlink);
        assert_eq!(m.hearing(&view(1, Direction::Downlink, 2600, 1)), Hearing::NotSensed);
        assert_eq!(m.hearing(&view(1, Direction::Downlink, 2400, 1)), Hearing::Listen);
        // its own output carriers are ignored
        assert_eq!(m.hearing(&view(1, Direction::Downlink, 2440, 1)), Hearing::Ignore);

        let mut wide = m.config.clone();
        wide.sensing_bandwidth_mhz = 250;
        let wide = Mim::new(wide).unwrap();
        assert_eq!(wide.hearing(&view(1, Direction::Downlink, 2600, 1)), Hearing::Listen);
        assert_eq!(wide.config.output_for(FrequencyHz::from_mhz(2600)), FrequencyHz::from_mhz(2600));
    }

    #[test]
    fn half_duplex_waits_for_whole_packet() {
        let mut m = hd();
        let t0 = RefTime::from_nanos(250);
        m.on_rx_start(t0, 0, view(1, Direction::Downlink, 2400, 1_000_000), t0 + 1_000_000);
        let mut out = Vec::new();
        let end = t0 + 1_000_000;
        let a = m.on_rx_end(end, 0);
        run_timers(&mut m, timers(&a), &mut out);
        assert_eq!(m.state.forwards.len(), 1);
        assert_eq!(m.state.forwards[0].forward_start, end);
        assert_eq!(m.state.forwards[0].forward_start - m.state.forwards[0].rx_start, 1_000_000);
    }

    #[test]
    fn half_duplex_burst_drains_in_order() {
        let mut m = hd();
        let mut t = RefTime::from_nanos(250);
        let mut pending = Vec::new();
        for i in 0..5u64 {
            let end = t + 1_000_000;
            m.on_rx_start(t, i, view(i, Direction::Downlink, 2400, 1_000_000), end);
            pending.extend(timers(&m.on_rx_end(end, i)));
            t = end;
        }
        let mut out = Vec::new();
        run_timers(&mut m, pending, &mut out);
        let ids: Vec<u64> = m.state.forwards.iter().map(|f| f.packet_id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
        for f in &m.state.forwards {
            assert!(f.forward_start - f.rx_start >= 1_000_000);
        }
    }

    #[test]
    fn half_duplex_drops_while_transmitting() {
        let mut m = hd();
        let t0 = RefTime::from_nanos(0);
        m.on_rx_start(t0, 0, view(1, Direction::Downlink, 2400, 1_000), t0 + 1_000);
        let a = m.on_rx_end(t0 + 1_000, 0);
        let mut out = Vec::new();
        run_timers(&mut m, timers(&a), &mut out);
        let b = m.on_rx_start(t0 + 1_500, 1, view(2, Direction::Downlink, 2400, 1_000), t0 + 2_500);
        assert!(b.iter().any(|a| matches!(a, MimAction::Dropped(DropEntry { reason: DropReason::ChainBusy, .. }))));
    }

    #[test]
    fn config_validation() {
        let mut cfg = hd().config;
        cfg.attack_direction = None;
        assert_eq!(cfg.validate(), Err(MimConfigError::MissingAttackDirection));
        let mut cfg = fd(ConflictPolicy::PreferDownlink).config;
        cfg.forward.pop();
        assert_eq!(cfg.validate(), Err(MimConfigError::Unmapped(2480)));
        let mut cfg = fd(ConflictPolicy::PreferDownlink).config;
        cfg.mode = MimMode::DoubleFullDuplex;
        cfg.listen_mhz.pop();
        assert_eq!(cfg.validate(), Err(MimConfigError::SingleChain));
    }
}
