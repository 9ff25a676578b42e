use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::clock::RefTime;
use crate::endpoints::{NodeStats, Rrc};
use crate::medium::{NodeId, PacketKind, ReceptionClass};
use crate::mim::DropReason;
use crate::reveal::{Phase, TestKind, Verdict};
use crate::sync::Direction;

/// One line of the JSON-lines event trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "ev", rename_all = "snake_case")]
pub enum TraceEvent {
    Tx {
        t: RefTime,
        tx: usize,
        packet: u64,
        src: NodeId,
        dir: Direction,
        kind: PacketKind,
        mhz: u64,
        dur_ns: i64,
        tti: u64,
        forwarded: bool,
    },
    Rx {
        t: RefTime,
        tx: usize,
        packet: u64,
        node: NodeId,
        start: RefTime,
        class: ReceptionClass,
        snr_db: f64,
        decoded: bool,
    },
    MimDrop {
        t: RefTime,
        /// When the dropped packet reached the relay.
        at: RefTime,
        packet: u64,
        dir: Direction,
        reason: DropReason,
    },
    Abort {
        t: RefTime,
        tx: usize,
    },
    Sync {
        t: RefTime,
        ok: bool,
        skew: Option<f64>,
        ta_us: Option<f64>,
    },
    MissedGrant {
        t: RefTime,
        tti: u64,
    },
    Retune {
        t: RefTime,
        node: NodeId,
        tx_mhz: u64,
        rx_mhz: u64,
    },
    Rrc {
        t: RefTime,
        node: NodeId,
        state: Rrc,
    },
    Slot {
        t: RefTime,
        tti: u64,
        kind: PacketKind,
        class: ReceptionClass,
        snr_db: f64,
    },
    Stats {
        tti: u64,
        downlink: NodeStats,
        uplink: NodeStats,
    },
    Phase {
        t: RefTime,
        test: TestKind,
        id: u32,
        phase: Phase,
    },
    Verdict {
        t: RefTime,
        test: TestKind,
        id: u32,
        verdict: Verdict,
    },
}

impl TraceEvent {
    pub fn name(&self) -> &'static str {
        match self {
            TraceEvent::Tx { .. } => "tx",
            TraceEvent::Rx { .. } => "rx",
            TraceEvent::MimDrop { .. } => "mim_drop",
            TraceEvent::Abort { .. } => "abort",
            TraceEvent::Sync { .. } => "sync",
            TraceEvent::MissedGrant { .. } => "missed_grant",
            TraceEvent::Retune { .. } => "retune",
            TraceEvent::Rrc { .. } => "rrc",
            TraceEvent::Slot { .. } => "slot",
            TraceEvent::Stats { .. } => "stats",
            TraceEvent::Phase { .. } => "phase",
            TraceEvent::Verdict { .. } => "verdict",
        }
    }
}

/// Counts every event and optionally keeps the serialized lines.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    lines: Option<Vec<String>>,
    counts: BTreeMap<String, u64>,
}

impl Trace {
    pub fn new(keep_lines: bool) -> Self {
        Trace {
            lines: keep_lines.then(Vec::new),
            counts: BTreeMap::new(),
        }
    }

    pub fn enabled(&self) -> bool {
        self.lines.is_some()
    }

    pub fn record(&mut self, ev: TraceEvent) {
        *self.counts.entry(ev.name().to_string()).or_default() += 1;
        if let Some(lines) = &mut self.lines {
            lines.push(serde_json::to_string(&ev).expect("trace event serializes"));
        }
    }

    pub fn counts(&self) -> &BTreeMap<String, u64> {
        &self.counts
    }

    pub fn lines(&self) -> &[String] {
        self.lines.as_deref().unwrap_or(&[])
    }

    pub fn write_to(&self, mut w: impl Write) -> io::Result<()> {
        for l in self.lines() {
            writeln!(w, "{l}")?;
        }
        Ok(())
    }
}

pub fn parse_line(line: &str) -> serde_json::Result<TraceEvent> {
    serde_json::from_str(line)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lines_parse_back() {
        let mut t = Trace::new(true);
        t.record(TraceEvent::MissedGrant {
            t: RefTime::from_nanos(5),
            tti: 3,
        });
        t.record(TraceEvent::Abort {
            t: RefTime::from_nanos(7),
            tx: 1,
        });
        assert_eq!(t.lines().len(), 2);
        assert!(t.lines()[0].contains("\"ev\":\"missed_grant\""));
        assert_eq!(parse_line(&t.lines()[1]).unwrap(), TraceEvent::Abort { t: RefTime::from_nanos(7), tx: 1 });
        assert_eq!(t.counts()["abort"], 1);
    }

    #[test]
    fn disabled_trace_still_counts() {
        let mut t = Trace::new(false);
        t.record(TraceEvent::MissedGrant {
            t: RefTime::ZERO,
            tti: 0,
        });
        assert!(t.lines().is_empty());
        assert_eq!(t.counts()["missed_grant"], 1);
    }
}
