use std::ops::Range;

use crate::clock::{local_of, ref_of, LocalTime, RefTime};
use crate::endpoints::{
    retune, tti_start, ConnectionState, DlRecord, ExpectedUplink, Grant, MeasureConfig, Payload, RetuneCommand, RxReport,
    SlotOutcome, TimingCommand, TTI_NS,
};
use crate::medium::{FrequencyHz, NodeId, Packet, PacketKind, ReceptionClass};
use crate::reveal::{DetectionVerdict, LinkQuality, LinkScheduler, Phase, TestKind};
use crate::sync::{plan_uplink_send, Direction, ExchangeRecord, SyncEstimate};

use super::engine::{Event, Pending, ScheduledDl, Simulation, CONTROL_OFFSET_NS, MOBILE_CHECK_NS, SLOT_GUARD_NS};
use super::trace::TraceEvent;

impl Simulation {
    pub(super) fn on_tick(&mut self, k: u64) {
        self.next_tick = k + 1;
        self.push(tti_start(k + 1), Event::Tti(k + 1));
        if let Some(cmd) = self.base_retune.filter(|c| c.at_tti <= k) {
            self.base_retune = None;
            self.base.apply_retune(cmd);
            let r = self.base.radio;
            self.trace.record(TraceEvent::Retune {
                t: self.now,
                node: NodeId::Base,
                tx_mhz: r.tx.hz() / 1_000_000,
                rx_mhz: r.rx.hz() / 1_000_000,
            });
        }
        if k < self.attach_end {
            if k % 2 == 0 {
                self.send_probe(k);
            }
            return;
        }
        if k == self.attach_end {
            self.finish_attach();
        }
        let Some(sync) = self.sync else {
            return;
        };
        let scheduled = self.scheduled_dl.remove(&k).unwrap_or_default();
        let idle = scheduled.is_empty();
        let normal = k % 2 == 0 && !self.base.is_reserved(k) && idle;
        if normal {
            self.send_normal(k, &sync);
        }
        for d in scheduled {
            let mut payload = self.base.downlink_payload(tti_start(k) + d.offset_ns);
            payload.data_bytes = crate::endpoints::bytes_for(d.packet_ns);
            self.send_downlink(k, d.id, d.offset_ns, d.packet_ns, d.kind, payload, false);
        }
        if !normal && idle && !self.base.is_reserved(k) {
            if let Some(i) = self.control.iter().position(|c| c.tti <= k) {
                let c = self.control.remove(i);
                let mut payload = c.payload;
                payload.base_stamp = Some(tti_start(k) + CONTROL_OFFSET_NS);
                payload.timing = Some(timing_of(&sync));
                self.send_downlink(k, c.id, CONTROL_OFFSET_NS, self.cfg.traffic.control_ns, c.kind, payload, false);
            }
        }
        if k % 2 == 0 {
            self.schedule_mobile_check(k);
        }
        if self.trace.enabled() && k >= self.attach_end + 4 {
            self.emit_stats(k - 4);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn send_downlink(
        &mut self,
        k: u64,
        id: u64,
        offset_ns: i64,
        packet_ns: i64,
        kind: PacketKind,
        payload: Payload,
        probe: bool,
    ) {
        let at = tti_start(k) + offset_ns;
        self.base.dl.insert(
            id,
            DlRecord {
                packet_id: id,
                tti: k,
                kind,
                sent_at: at,
                duration_ns: packet_ns,
                probe,
                report: None,
            },
        );
        let p = Packet {
            id,
            src: NodeId::Base,
            dst: NodeId::Mobile,
            direction: Direction::Downlink,
            frequency: self.base.radio.tx,
            tx_start: at,
            duration_ns: packet_ns,
            kind,
            payload_bytes: payload.data_bytes,
            tti: k,
            payload,
        };
        self.transmit(p, false, false);
    }

    fn send_probe(&mut self, k: u64) {
        let id = self.alloc_packet();
        let t = &self.cfg.traffic;
        let (probe_ns, grant_freq) = (t.probe_ns, self.mobile.radio.tx);
        let mut payload = self.base.downlink_payload(tti_start(k));
        payload.grants.push(Grant {
            tti_index: k,
            direction: Direction::Uplink,
            duration_ttis: 1,
            frequency: grant_freq,
            tx_local: None,
            packet_ns: probe_ns,
            kind: PacketKind::Data,
        });
        self.send_downlink(k, id, 0, probe_ns, PacketKind::Data, payload, true);
    }

    fn finish_attach(&mut self) {
        match SyncEstimate::from_records(&self.base.records) {
            Ok(s) => {
                self.sync = Some(s);
                self.set_timing_advance(&s);
                self.trace.record(TraceEvent::Sync {
                    t: self.now,
                    ok: true,
                    skew: Some(s.skew_hat.as_f64()),
                    ta_us: self.ta.map(|t| t.as_us()),
                });
                if let Some(st) = self.base.monitor.attach(self.now) {
                    self.trace.record(TraceEvent::Rrc {
                        t: self.now,
                        node: NodeId::Base,
                        state: st.rrc,
                    });
                }
            }
            Err(_) => self.trace.record(TraceEvent::Sync {
                t: self.now,
                ok: false,
                skew: None,
                ta_us: None,
            }),
        }
    }

    fn send_normal(&mut self, k: u64, sync: &SyncEstimate) {
        let t = self.cfg.traffic;
        let id = self.alloc_packet();
        let mut payload = self.base.downlink_payload(tti_start(k));
        payload.data_bytes = crate::endpoints::bytes_for(t.data_ns);
        payload.timing = Some(timing_of(sync));
        let ul_tti = k + t.grant_lead_ttis;
        if !self.base.is_reserved(ul_tti) {
            let target = tti_start(ul_tti);
            let tx_local = plan_uplink_send(sync.skew_hat, sync.combined_up, target);
            payload.grants.push(Grant {
                tti_index: ul_tti,
                direction: Direction::Uplink,
                duration_ttis: 1,
                frequency: self.mobile.radio.tx,
                tx_local: Some(tx_local),
                packet_ns: t.data_ns,
                kind: PacketKind::Data,
            });
            let window = (target, target + t.data_ns);
            let slot = self.base.expect_uplink(ul_tti, PacketKind::Data, Some(tx_local), window, true);
            self.push(window.1 + SLOT_GUARD_NS, Event::SlotClose(slot));
        }
        self.send_downlink(k, id, 0, t.data_ns, PacketKind::Data, payload, false);
    }

    fn schedule_mobile_check(&mut self, k: u64) {
        let Some(timing) = self.mobile.timing else {
            return;
        };
        if self.mobile.monitor.state().rrc != crate::endpoints::Rrc::Connected {
            return;
        }
        let local = timing.arrival_local(tti_start(k)) + timing.skew.scale_nanos(MOBILE_CHECK_NS);
        let at = ref_of(&self.mobile.clock, local).max(self.now);
        self.push(at, Event::MobileCheck(k));
    }

    pub(super) fn on_mobile_check(&mut self, k: u64) {
        if self.mobile.is_reserved(k) {
            return;
        }
        let received = self.mobile.decoded_tti(k);
        if let Some(st) = self.mobile.monitor.observe(self.now, received) {
            self.trace.record(TraceEvent::Rrc {
                t: self.now,
                node: NodeId::Mobile,
                state: st.rrc,
            });
        }
    }

    pub(super) fn on_slot_close(&mut self, slot: u64) {
        let mut draw = None;
        let chan = self.cfg.channel.clone();
        let jitter = chan.snr_jitter_db;
        let rng = &mut self.rng;
        let out = self.base.close_slot(slot, |class| {
            let base = match class {
                ReceptionClass::Clear => chan.clear_snr_db,
                ReceptionClass::Collided => chan.collision_snr_db,
                ReceptionClass::Silent => chan.silent_snr_db,
            };
            let j = if jitter > 0.0 {
                rand::Rng::gen_range(rng, -jitter..=jitter)
            } else {
                0.0
            };
            draw = Some(base + j);
            base + j
        });
        let Some(out) = out else {
            return;
        };
        let snr = draw.unwrap_or_default();
        self.trace.record(TraceEvent::Slot {
            t: self.now,
            tti: out.tti,
            kind: out.kind,
            class: out.class.unwrap_or(ReceptionClass::Silent),
            snr_db: snr,
        });
        if self.base.ul.get(&slot).is_some_and(|s| s.normal) {
            self.ul_quality.push((out.tti, snr));
            if let Some(st) = self.base.monitor.observe(self.now, out.delivered) {
                self.trace.record(TraceEvent::Rrc {
                    t: self.now,
                    node: NodeId::Base,
                    state: st.rrc,
                });
            }
        }
    }

    fn emit_stats(&mut self, k: u64) {
        let mcfg = MeasureConfig::for_channel(&self.cfg.channel);
        let (dl, _) = crate::endpoints::measure(&self.base.downlink_outcomes(k..k + 1), TTI_NS, &mcfg);
        let (ul, _) = crate::endpoints::measure(&self.base.uplink_outcomes(k..k + 1), TTI_NS, &mcfg);
        self.trace.record(TraceEvent::Stats {
            tti: k,
            downlink: dl,
            uplink: ul,
        });
    }

    pub fn sync(&self) -> Option<SyncEstimate> {
        self.sync
    }

    /// Local time at the mobile for a reference instant.
    pub fn mobile_local(&self, t: RefTime) -> LocalTime {
        local_of(&self.mobile.clock, t)
    }

    fn queue_control(&mut self, tti: u64, kind: PacketKind, payload: Payload) -> u64 {
        let id = self.alloc_packet();
        self.control.push(Pending { tti, id, kind, payload });
        id
    }
}

fn timing_of(sync: &SyncEstimate) -> TimingCommand {
    TimingCommand {
        skew: sync.skew_hat,
        combined_down: sync.combined_down,
    }
}

impl LinkScheduler for Simulation {
    fn tti(&self) -> u64 {
        self.next_tick
    }

    fn remaining_ttis(&self) -> u64 {
        self.cfg.run_ttis.saturating_sub(self.next_tick)
    }

    fn run_ttis(&mut self, n: u64) {
        let target = (self.next_tick + n).min(self.cfg.run_ttis.max(self.next_tick));
        self.advance_to(target);
    }

    fn snr_threshold_db(&self) -> f64 {
        self.cfg.channel.snr_decode_threshold_db
    }

    fn measure_config(&self) -> MeasureConfig {
        MeasureConfig::for_channel(&self.cfg.channel)
    }

    fn link_quality(&self, window_ttis: u64) -> LinkQuality {
        let from = self.next_tick.saturating_sub(window_ttis);
        let samples: Vec<f64> = self.ul_quality.iter().filter(|(k, _)| *k >= from).map(|&(_, s)| s).collect();
        LinkQuality {
            uplink_samples: samples.len() as u32,
            uplink_min_snr_db: samples.iter().copied().reduce(f64::min),
            downlink_snr_db: self.base.last_dl_snr,
        }
    }

    fn records(&self) -> &[ExchangeRecord] {
        &self.base.records
    }

    fn sync_estimate(&self) -> Option<SyncEstimate> {
        self.sync
    }

    fn reserve(&mut self, ttis: Range<u64>) {
        self.base.reserved.push((ttis.start, ttis.end));
    }

    fn send_grants(&mut self, tti: u64, grants: Vec<Grant>, reserved: Range<u64>) -> u64 {
        let payload = Payload {
            grants,
            reserved: Some((reserved.start, reserved.end)),
            ..Payload::default()
        };
        self.queue_control(tti, PacketKind::ControlGrant, payload)
    }

    fn schedule_downlink(&mut self, tti: u64, offset_ns: i64, packet_ns: i64, count: u32, kind: PacketKind) -> Vec<u64> {
        let mut ids = Vec::new();
        for i in 0..count as i64 {
            let off = offset_ns + i * packet_ns;
            let k = tti + (off / TTI_NS) as u64;
            let id = self.alloc_packet();
            self.scheduled_dl.entry(k).or_default().push(ScheduledDl {
                id,
                offset_ns: off % TTI_NS,
                packet_ns,
                kind,
            });
            ids.push(id);
        }
        ids
    }

    fn expect_uplink(&mut self, tti: u64, kind: PacketKind, tx_local: Option<LocalTime>, window: (RefTime, RefTime)) -> u64 {
        let slot = self.base.expect_uplink(tti, kind, tx_local, window, false);
        self.push((window.1 + SLOT_GUARD_NS).max(self.now), Event::SlotClose(slot));
        slot
    }

    fn downlink_report(&self, packet_id: u64) -> Option<RxReport> {
        self.base.dl.get(&packet_id).and_then(|d| d.report)
    }

    fn downlink_sent_at(&self, packet_id: u64) -> Option<RefTime> {
        self.base.dl.get(&packet_id).map(|d| d.sent_at)
    }

    fn uplink_slot(&self, slot: u64) -> Option<ExpectedUplink> {
        self.base.ul.get(&slot).copied()
    }

    fn send_retune(&mut self, tti: u64, command: RetuneCommand) -> u64 {
        let payload = retune(command.target, command.which, command.at_tti, self.base.key());
        self.queue_control(tti, PacketKind::EncryptedControl, payload)
    }

    fn commit_retune(&mut self, command: RetuneCommand) {
        self.base_retune = Some(command);
    }

    fn base_connection(&self) -> ConnectionState {
        self.base.monitor.state()
    }

    fn normal_uplink_outcomes(&self, ttis: Range<u64>) -> Vec<SlotOutcome> {
        self.base
            .ul
            .values()
            .filter(|s| s.normal && ttis.contains(&s.tti))
            .filter_map(|s| s.outcome)
            .collect()
    }

    fn retune_target(&self) -> FrequencyHz {
        self.cfg.plan.retune_target()
    }

    fn log_phase(&mut self, test: TestKind, test_id: u32, phase: Phase) {
        self.trace.record(TraceEvent::Phase {
            t: self.now,
            test,
            id: test_id,
            phase,
        });
    }

    fn log_verdict(&mut self, verdict: &DetectionVerdict) {
        self.trace.record(TraceEvent::Verdict {
            t: self.now,
            test: verdict.test,
            id: verdict.test_id,
            verdict: verdict.verdict,
        });
        self.verdicts.push(verdict.clone());
    }
}
