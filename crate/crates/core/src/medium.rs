//! FDD radio medium: frequency plan, propagation, overlap resolution and a
//! three-regime SNR model (clear, collision, silent).

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::RefTime;
use crate::endpoints::Payload;
use crate::sync::Direction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FrequencyHz(u64);

impl FrequencyHz {
    pub fn new(hz: u64) -> Option<Self> {
        (hz > 0).then_some(FrequencyHz(hz))
    }

    pub const fn from_mhz(mhz: u64) -> Self {
        FrequencyHz(mhz * 1_000_000)
    }

    pub const fn hz(self) -> u64 {
        self.0
    }

    pub fn mhz(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn distance(self, other: FrequencyHz) -> u64 {
        self.0.abs_diff(other.0)
    }
}

impl fmt::Display for FrequencyHz {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}MHz", self.mhz())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeId {
    Base,
    Mobile,
    Mim,
}

impl NodeId {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeId::Base => "base",
            NodeId::Mobile => "mobile",
            NodeId::Mim => "mim",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PacketKind {
    Data,
    ControlGrant,
    EncryptedControl,
    Ack,
}

/// A scheduled over-the-air transmission.
#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    pub id: u64,
    pub src: NodeId,
    pub dst: NodeId,
    pub direction: Direction,
    pub frequency: FrequencyHz,
    pub tx_start: RefTime,
    pub duration_ns: i64,
    pub kind: PacketKind,
    pub payload_bytes: u32,
    /// TTI the packet belongs to. Identifies retransmitted copies too.
    pub tti: u64,
    pub payload: Payload,
}

impl Packet {
    pub fn tx_end(&self) -> RefTime {
        self.tx_start + self.duration_ns
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("SNR levels must satisfy silent < collision < threshold <= clear (got {silent}, {collision}, {threshold}, {clear})")]
    SnrOrdering {
        silent: f64,
        collision: f64,
        threshold: f64,
        clear: f64,
    },
    #[error("propagation delay must be non-negative")]
    NegativeDelay,
    #[error("relay position must lie in [0, 1]")]
    RelayPosition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    /// End-to-end propagation delay between base and mobile.
    pub prop_delay_ns: i64,
    /// Fractional position of the relay on the base-mobile path.
    pub mim_position: f64,
    pub clear_snr_db: f64,
    pub collision_snr_db: f64,
    pub silent_snr_db: f64,
    pub snr_decode_threshold_db: f64,
    /// Uniform measurement jitter applied to every SNR sample.
    pub snr_jitter_db: f64,
    pub pathloss_db: f64,
    pub rsrp_dbm: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            prop_delay_ns: 500,
            mim_position: 0.5,
            clear_snr_db: 18.0,
            collision_snr_db: 1.0,
            silent_snr_db: -5.0,
            snr_decode_threshold_db: 10.0,
            snr_jitter_db: 0.0,
            pathloss_db: 64.0,
            rsrp_dbm: -64.0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<(), ChannelError> {
        let ok = self.silent_snr_db < self.collision_snr_db
            && self.collision_snr_db < self.snr_decode_threshold_db
            && self.snr_decode_threshold_db <= self.clear_snr_db;
        if !ok {
            return Err(ChannelError::SnrOrdering {
                silent: self.silent_snr_db,
                collision: self.collision_snr_db,
                threshold: self.snr_decode_threshold_db,
                clear: self.clear_snr_db,
            });
        }
        if self.prop_delay_ns < 0 {
            return Err(ChannelError::NegativeDelay);
        }
        if !(0.0..=1.0).contains(&self.mim_position) {
            return Err(ChannelError::RelayPosition);
        }
        Ok(())
    }

    pub fn noise_floor_dbm(&self) -> f64 {
        self.rsrp_dbm - self.clear_snr_db
    }

    pub fn metrics(&self, class: ReceptionClass) -> LinkMetrics {
        let (snr_db, received_power_dbm) = match class {
            ReceptionClass::Clear => (self.clear_snr_db, self.rsrp_dbm),
            // two equal-energy signals add 3 dB of power
            ReceptionClass::Collided => (self.collision_snr_db, self.rsrp_dbm + 3.0),
            ReceptionClass::Silent => (self.silent_snr_db, self.noise_floor_dbm()),
        };
        LinkMetrics {
            snr_db,
            received_power_dbm,
            per: per_of(snr_db, self.snr_decode_threshold_db),
            timing_advance_us: None,
        }
    }
}

/// Which nodes can hear each other directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Reachability {
    pub base_to_mobile: bool,
    pub mobile_to_base: bool,
}

impl Default for Reachability {
    fn default() -> Self {
        Reachability {
            base_to_mobile: true,
            mobile_to_base: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkMetrics {
    pub snr_db: f64,
    pub received_power_dbm: f64,
    pub per: f64,
    pub timing_advance_us: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReceptionClass {
    Clear,
    Collided,
    Silent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum DeliveryOutcome {
    Delivered {
        node: NodeId,
        rx_start: RefTime,
        rx_end: RefTime,
    },
    NotTuned {
        node: NodeId,
    },
    OutOfRange {
        node: NodeId,
    },
}

/// Interval occupied by one reception at one node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Reception {
    pub start: RefTime,
    pub end: RefTime,
    pub frequency: FrequencyHz,
    /// The transmission itself already carried a collision.
    pub corrupted: bool,
}

impl Reception {
    pub fn overlaps(&self, other: &Reception) -> bool {
        self.frequency == other.frequency && self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Medium {
    pub channel: ChannelConfig,
    pub reach: Reachability,
}

impl Medium {
    pub fn new(channel: ChannelConfig, reach: Reachability) -> Self {
        Medium { channel, reach }
    }

    pub fn reachable(&self, src: NodeId, dst: NodeId) -> bool {
        match (src, dst) {
            (NodeId::Base, NodeId::Mobile) => self.reach.base_to_mobile,
            (NodeId::Mobile, NodeId::Base) => self.reach.mobile_to_base,
            (a, b) => a != b,
        }
    }

    /// One-way propagation delay between two nodes.
    pub fn prop_delay_ns(&self, a: NodeId, b: NodeId) -> i64 {
        let full = self.channel.prop_delay_ns as f64;
        let to_mim = (full * self.channel.mim_position).round() as i64;
        match (a, b) {
            (NodeId::Base, NodeId::Mobile) | (NodeId::Mobile, NodeId::Base) => {
                self.channel.prop_delay_ns
            }
            (NodeId::Base, NodeId::Mim) | (NodeId::Mim, NodeId::Base) => to_mim,
            (NodeId::Mobile, NodeId::Mim) | (NodeId::Mim, NodeId::Mobile) => {
                self.channel.prop_delay_ns - to_mim
            }
            _ => 0,
        }
    }

    /// Outcome of `p` at each listener. Every listener other than the
    /// sender gets exactly one outcome.
    pub fn deliver(&self, p: &Packet, listeners: &[(NodeId, FrequencyHz)]) -> Vec<DeliveryOutcome> {
        listeners
            .iter()
            .filter(|(node, _)| *node != p.src)
            .map(|&(node, tuned)| {
                if !self.reachable(p.src, node) {
                    DeliveryOutcome::OutOfRange { node }
                } else if tuned != p.frequency {
                    DeliveryOutcome::NotTuned { node }
                } else {
                    let rx_start = p.tx_start + self.prop_delay_ns(p.src, node);
                    DeliveryOutcome::Delivered {
                        node,
                        rx_start,
                        rx_end: rx_start + p.duration_ns,
                    }
                }
            })
            .collect()
    }
}

/// Classifies every reception of a set observed at one node.
pub fn classify_overlaps(receptions: &[Reception]) -> Vec<ReceptionClass> {
    receptions
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let hit = r.corrupted
                || receptions
                    .iter()
                    .enumerate()
                    .any(|(j, o)| i != j && r.overlaps(o));
            if hit {
                ReceptionClass::Collided
            } else {
                ReceptionClass::Clear
            }
        })
        .collect()
}

/// Link metrics per reception; see [`classify_overlaps`].
pub fn resolve_overlap(channel: &ChannelConfig, receptions: &[Reception]) -> Vec<LinkMetrics> {
    classify_overlaps(receptions)
        .into_iter()
        .map(|c| channel.metrics(c))
        .collect()
}

/// Metrics of an expected grant in which no energy arrived.
pub fn silent_metrics(channel: &ChannelConfig) -> LinkMetrics {
    channel.metrics(ReceptionClass::Silent)
}

/// Per-packet error probability; decoding succeeds at or above threshold.
pub fn per_of(snr_db: f64, threshold_db: f64) -> f64 {
    if snr_db >= threshold_db {
        0.0
    } else {
        1.0
    }
}

/// Timing advance in tenths of a microsecond.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TimingAdvance(u32);

impl TimingAdvance {
    pub fn tenths_us(self) -> u32 {
        self.0
    }

    pub fn as_us(self) -> f64 {
        self.0 as f64 / 10.0
    }
}

/// Half the round trip, quantized to 0.1 us.
pub fn timing_advance(round_trip_ns: i64) -> TimingAdvance {
    assert!(round_trip_ns >= 0, "round trip must be non-negative");
    // 100 ns per tenth; halving folded into the divisor
    TimingAdvance(((round_trip_ns + 100) / 200) as u32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::endpoints::Payload;

    fn packet(freq: u64) -> Packet {
        Packet {
            id: 1,
            src: NodeId::Base,
            dst: NodeId::Mobile,
            direction: Direction::Downlink,
            frequency: FrequencyHz::from_mhz(freq),
            tx_start: RefTime::from_nanos(1_000),
            duration_ns: 500_000,
            kind: PacketKind::Data,
            payload_bytes: 100,
            tti: 0,
            payload: Payload::empty_data(),
        }
    }

    #[test]
    fn delivers_only_on_tuned_frequency() {
        let m = Medium::new(ChannelConfig::default(), Reachability::default());
        let out = m.deliver(&packet(2500), &[(NodeId::Mobile, FrequencyHz::from_mhz(2500))]);
        assert_eq!(
            out,
            vec![DeliveryOutcome::Delivered {
                node: NodeId::Mobile,
                rx_start: RefTime::from_nanos(1_500),
                rx_end: RefTime::from_nanos(501_500),
            }]
        );
        let out = m.deliver(&packet(2440), &[(NodeId::Mobile, FrequencyHz::from_mhz(2500))]);
        assert_eq!(out, vec![DeliveryOutcome::NotTuned { node: NodeId::Mobile }]);
    }

    #[test]
    fn same_frequency_listeners_get_identical_copies() {
        let m = Medium::new(ChannelConfig::default(), Reachability::default());
        let f = FrequencyHz::from_mhz(2500);
        let out = m.deliver(&packet(2500), &[(NodeId::Mobile, f), (NodeId::Mim, f), (NodeId::Base, f)]);
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|o| matches!(o, DeliveryOutcome::Delivered { .. })));
    }

    #[test]
    fn out_of_range_when_no_direct_link() {
        let m = Medium::new(
            ChannelConfig::default(),
            Reachability {
                base_to_mobile: false,
                mobile_to_base: true,
            },
        );
        let out = m.deliver(&packet(2500), &[(NodeId::Mobile, FrequencyHz::from_mhz(2500))]);
        assert_eq!(out, vec![DeliveryOutcome::OutOfRange { node: NodeId::Mobile }]);
    }

    #[test]
    fn snr_regimes() {
        let c = ChannelConfig::default();
        let f = FrequencyHz::from_mhz(2400);
        let a = Reception {
            start: RefTime::from_nanos(0),
            end: RefTime::from_nanos(1000),
            frequency: f,
            corrupted: false,
        };
        assert_eq!(resolve_overlap(&c, &[a])[0].snr_db, 18.0);
        let b = Reception {
            start: RefTime::from_nanos(400),
            end: RefTime::from_nanos(1400),
            ..a
        };
        let both = resolve_overlap(&c, &[a, b]);
        assert!(both.iter().all(|m| m.snr_db == 1.0 && m.per == 1.0));
        assert_eq!(silent_metrics(&c).snr_db, -5.0);
        // touching intervals do not collide
        let touching = Reception {
            start: RefTime::from_nanos(1000),
            end: RefTime::from_nanos(2000),
            ..a
        };
        assert_eq!(
            classify_overlaps(&[a, touching]),
            vec![ReceptionClass::Clear, ReceptionClass::Clear]
        );
    }

    #[test]
    fn per_step() {
        assert_eq!(per_of(18.0, 10.0), 0.0);
        assert_eq!(per_of(1.0, 10.0), 1.0);
        assert_eq!(per_of(10.0, 10.0), 0.0);
    }

    #[test]
    fn timing_advance_quantization() {
        assert_eq!(timing_advance(1_000).as_us(), 0.5);
        assert_eq!(timing_advance(10_400).as_us(), 5.2);
        assert_eq!(timing_advance(0).as_us(), 0.0);
        assert_eq!(timing_advance(149).tenths_us(), 1);
        assert_eq!(timing_advance(99).tenths_us(), 0);
    }

    #[test]
    fn channel_validation() {
        assert!(ChannelConfig::default().validate().is_ok());
        let bad = ChannelConfig {
            collision_snr_db: 12.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(ChannelError::SnrOrdering { .. })));
    }

    #[test]
    fn relay_splits_the_path() {
        let m = Medium::new(ChannelConfig::default(), Reachability::default());
        assert_eq!(m.prop_delay_ns(NodeId::Base, NodeId::Mim), 250);
        assert_eq!(m.prop_delay_ns(NodeId::Mim, NodeId::Mobile), 250);
        assert_eq!(m.prop_delay_ns(NodeId::Mobile, NodeId::Base), 500);
    }

    proptest::proptest! {
        #[test]
        fn overlap_classes_order_independent(
            starts in proptest::collection::vec(0i64..10_000, 1..6),
            rot in 0usize..6,
        ) {
            let f = FrequencyHz::from_mhz(2400);
            let recs: Vec<Reception> = starts.iter().map(|&s| Reception {
                start: RefTime::from_nanos(s),
                end: RefTime::from_nanos(s + 1_500),
                frequency: f,
                corrupted: false,
            }).collect();
            let classes = classify_overlaps(&recs);
            let k = rot % recs.len();
            let mut rotated = recs.clone();
            rotated.rotate_left(k);
            let mut rc = classify_overlaps(&rotated);
            rc.rotate_right(k);
            proptest::prop_assert_eq!(classes, rc);
        }
    }
}
