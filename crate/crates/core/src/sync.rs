//! Timestamp-exchange estimation between a reference (base station) clock
//! and a slave (mobile) clock.
//!
//! Downlink packets relate the stamps by `r_m = a * s_b + (a * d_bm + b)`,
//! uplink packets by `s_m = a * r_b + (b - a * d_mb)`. The skew `a` and the
//! two combined quantities are identifiable; `b`, `d_bm` and `d_mb`
//! individually are not, unless the delays are known to be symmetric.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{
    div_round, local_of, ref_of, ClockParams, LocalTime, RefTime, Skew, NANOS_PER_SEC,
    TICKS_PER_NANO, TICKS_PER_SEC,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyncError {
    #[error("records {0} and {1} have identical send stamps")]
    DegeneratePair(usize, usize),
    #[error("records {0} and {1} travel in different directions")]
    DirectionMismatch(usize, usize),
    #[error("record index {0} out of range")]
    IndexOutOfRange(usize),
    #[error("need at least {needed} records, got {got}")]
    InsufficientRecords { needed: usize, got: usize },
    #[error("records must alternate direction starting with downlink (record {0})")]
    NotAlternating(usize),
    #[error("no {0} records")]
    MissingDirection(Direction),
    #[error("solved delay {0} s is negative; symmetric-delay assumption violated")]
    NegativeDelay(f64),
    #[error("skew estimate must be positive")]
    NonPositiveSkew,
    #[error("malformed record line {line:?}: {reason}")]
    Parse { line: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Base station to mobile.
    Downlink,
    /// Mobile to base station.
    Uplink,
}

impl Direction {
    pub fn reverse(self) -> Direction {
        match self {
            Direction::Downlink => Direction::Uplink,
            Direction::Uplink => Direction::Downlink,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Downlink => "downlink",
            Direction::Uplink => "uplink",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "downlink" | "dl" => Ok(Direction::Downlink),
            "uplink" | "ul" => Ok(Direction::Uplink),
            other => Err(format!("unknown direction {other:?}")),
        }
    }
}

/// One time-stamped packet exchange.
///
/// The base station clock is the reference, so its stamp is a [`RefTime`];
/// the mobile stamp is on the mobile's local scale. For downlink packets the
/// base stamp is the send stamp, for uplink packets the receive stamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExchangeRecord {
    pub packet_id: u64,
    pub direction: Direction,
    pub base_stamp: RefTime,
    pub mobile_stamp: LocalTime,
}

impl ExchangeRecord {
    /// Sender's stamp rendered in nanoseconds of the sender's clock.
    pub fn send_stamp_ns(&self) -> f64 {
        match self.direction {
            Direction::Downlink => self.base_stamp.nanos() as f64,
            Direction::Uplink => self.mobile_stamp.as_nanos_f64(),
        }
    }

    pub fn recv_stamp_ns(&self) -> f64 {
        match self.direction {
            Direction::Downlink => self.mobile_stamp.as_nanos_f64(),
            Direction::Uplink => self.base_stamp.nanos() as f64,
        }
    }

    /// `id,direction,send_stamp_ns,recv_stamp_ns`, stamps exact decimals.
    pub fn to_line(&self) -> String {
        let base = self.base_stamp.nanos().to_string();
        let mobile = format_local_ns(self.mobile_stamp);
        let (send, recv) = match self.direction {
            Direction::Downlink => (base, mobile),
            Direction::Uplink => (mobile, base),
        };
        format!("{},{},{},{}", self.packet_id, self.direction, send, recv)
    }

    pub fn parse_line(line: &str) -> Result<Self, SyncError> {
        let err = |reason: &str| SyncError::Parse {
            line: line.to_string(),
            reason: reason.to_string(),
        };
        let fields: Vec<&str> = line.trim().split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(err("expected 4 comma-separated fields"));
        }
        let packet_id = fields[0].parse().map_err(|_| err("bad packet id"))?;
        let direction: Direction = fields[1].parse().map_err(|e: String| err(&e))?;
        let (base_s, mobile_s) = match direction {
            Direction::Downlink => (fields[2], fields[3]),
            Direction::Uplink => (fields[3], fields[2]),
        };
        let base_stamp = RefTime::from_nanos(
            base_s
                .parse()
                .map_err(|_| err("base stamp must be integer ns"))?,
        );
        let mobile_stamp = parse_local_ns(mobile_s).ok_or_else(|| err("bad mobile stamp"))?;
        Ok(ExchangeRecord {
            packet_id,
            direction,
            base_stamp,
            mobile_stamp,
        })
    }
}

fn format_local_ns(t: LocalTime) -> String {
    let ticks = t.ticks();
    let neg = ticks < 0;
    let abs = ticks.unsigned_abs();
    let whole = abs / TICKS_PER_NANO as u128;
    let frac = abs % TICKS_PER_NANO as u128;
    let sign = if neg { "-" } else { "" };
    if frac == 0 {
        format!("{sign}{whole}")
    } else {
        let digits = format!("{frac:012}");
        format!("{sign}{whole}.{}", digits.trim_end_matches('0'))
    }
}

fn parse_local_ns(s: &str) -> Option<LocalTime> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let (whole, frac) = match body.split_once('.') {
        Some((w, f)) => (w, f),
        None => (body, ""),
    };
    if whole.is_empty() || frac.len() > 12 || !frac.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let whole: i128 = whole.parse().ok()?;
    let frac_ticks: i128 = if frac.is_empty() {
        0
    } else {
        format!("{frac:0<12}").parse().ok()?
    };
    let ticks = whole * TICKS_PER_NANO + frac_ticks;
    Some(LocalTime::from_ticks(if neg { -ticks } else { ticks }))
}

/// Writes one record per line.
pub fn write_records(records: &[ExchangeRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    out
}

/// Parses line-delimited records, skipping blanks and `#` comments.
pub fn read_records(text: &str) -> Result<Vec<ExchangeRecord>, SyncError> {
    text.lines()
        .filter(|l| {
            let l = l.trim();
            !l.is_empty() && !l.starts_with('#')
        })
        .map(ExchangeRecord::parse_line)
        .collect()
}

/// One-way delays on the reference scale.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathDelays {
    pub d_bm_ns: i64,
    pub d_mb_ns: i64,
}

impl PathDelays {
    pub fn symmetric(ns: i64) -> Self {
        PathDelays {
            d_bm_ns: ns,
            d_mb_ns: ns,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SymmetricSolution {
    pub delay_s: f64,
    pub offset_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyncEstimate {
    pub skew_hat: Skew,
    /// `a * d_bm + b` on the mobile scale.
    pub combined_down: LocalTime,
    /// `b - a * d_mb` on the mobile scale.
    pub combined_up: LocalTime,
    pub symmetric_solution: Option<SymmetricSolution>,
}

impl SyncEstimate {
    /// Estimates skew from the widest downlink baseline (falling back to
    /// uplink) and the combined quantities from all records.
    pub fn from_records(records: &[ExchangeRecord]) -> Result<Self, SyncError> {
        let skew_hat = match default_skew_pair(records, Direction::Downlink)
            .or_else(|| default_skew_pair(records, Direction::Uplink))
        {
            Some((i, j)) => estimate_skew(records, i, j)?,
            None => {
                return Err(SyncError::InsufficientRecords {
                    needed: 2,
                    got: records.len(),
                })
            }
        };
        let (combined_down, combined_up) = estimate_combined(records, skew_hat)?;
        Ok(SyncEstimate {
            skew_hat,
            combined_down,
            combined_up,
            symmetric_solution: None,
        })
    }

    pub fn with_symmetric_solution(mut self) -> Result<Self, SyncError> {
        self.symmetric_solution = Some(solve_symmetric(
            self.skew_hat,
            self.combined_down,
            self.combined_up,
        )?);
        Ok(self)
    }
}

/// First and last record of `direction`: the widest baseline.
pub fn default_skew_pair(records: &[ExchangeRecord], direction: Direction) -> Option<(usize, usize)> {
    let first = records.iter().position(|r| r.direction == direction)?;
    let last = records.iter().rposition(|r| r.direction == direction)?;
    (first != last).then_some((first, last))
}

/// Skew from two same-direction records: mobile-stamp delta over
/// base-stamp delta. For downlink pairs that is receive over send, for
/// uplink pairs send over receive; both equal `a` exactly when delays are
/// constant.
pub fn estimate_skew(records: &[ExchangeRecord], k: usize, n: usize) -> Result<Skew, SyncError> {
    let rk = records.get(k).ok_or(SyncError::IndexOutOfRange(k))?;
    let rn = records.get(n).ok_or(SyncError::IndexOutOfRange(n))?;
    if rk.direction != rn.direction {
        return Err(SyncError::DirectionMismatch(k, n));
    }
    let send_equal = match rk.direction {
        Direction::Downlink => rk.base_stamp == rn.base_stamp,
        Direction::Uplink => rk.mobile_stamp == rn.mobile_stamp,
    };
    let base_delta = (rk.base_stamp - rn.base_stamp) as i128;
    if send_equal || base_delta == 0 {
        return Err(SyncError::DegeneratePair(k, n));
    }
    let mobile_delta = (rk.mobile_stamp - rn.mobile_stamp).ticks();
    // ticks / ns is already in 1e-12 units
    let (num, den) = if base_delta < 0 {
        (-mobile_delta, -base_delta)
    } else {
        (mobile_delta, base_delta)
    };
    let raw = div_round(num, den);
    if raw <= 0 {
        return Err(SyncError::NonPositiveSkew);
    }
    Ok(Skew::from_raw(raw as i64))
}

/// Least-squares skew over every record, pooling per-direction slopes of
/// mobile stamp against base stamp. Used when receive stamps carry jitter.
pub fn estimate_skew_lsq(records: &[ExchangeRecord]) -> Result<Skew, SyncError> {
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut used = 0usize;
    for dir in [Direction::Downlink, Direction::Uplink] {
        let pts: Vec<(f64, f64)> = records
            .iter()
            .filter(|r| r.direction == dir)
            .map(|r| (r.base_stamp.nanos() as f64, r.mobile_stamp.as_nanos_f64()))
            .collect();
        if pts.len() < 2 {
            continue;
        }
        // center on the first point to keep magnitudes small
        let (x0, y0) = pts[0];
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0 - x0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1 - y0).sum::<f64>() / n;
        for &(x, y) in &pts {
            let dx = x - x0 - mx;
            sxy += dx * (y - y0 - my);
            sxx += dx * dx;
        }
        used += pts.len();
    }
    if sxx == 0.0 {
        return Err(SyncError::InsufficientRecords {
            needed: 2,
            got: used,
        });
    }
    let slope = sxy / sxx;
    if slope <= 0.0 {
        return Err(SyncError::NonPositiveSkew);
    }
    Ok(Skew::from_f64(slope))
}

/// Coefficient matrix of the linear system in
/// `(a, a*d_bm, a*d_mb, b)`; see [`build_observation_matrix`].
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMatrix {
    pub rows: DMatrix<f64>,
    /// Left-hand side: the mobile stamps, in seconds.
    pub rhs: Vec<f64>,
}

/// Downlink rows are `(s_b, 1, 0, 1)` and uplink rows `(r_b, 0, -1, 1)`,
/// first column in seconds.
pub fn build_observation_matrix(records: &[ExchangeRecord]) -> Result<ObservationMatrix, SyncError> {
    if records.len() < 4 {
        return Err(SyncError::InsufficientRecords {
            needed: 4,
            got: records.len(),
        });
    }
    let mut rows = DMatrix::zeros(records.len(), 4);
    let mut rhs = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let expected = if i % 2 == 0 {
            Direction::Downlink
        } else {
            Direction::Uplink
        };
        if r.direction != expected {
            return Err(SyncError::NotAlternating(i));
        }
        rows[(i, 0)] = r.base_stamp.as_secs_f64();
        match r.direction {
            Direction::Downlink => {
                rows[(i, 1)] = 1.0;
                rows[(i, 2)] = 0.0;
            }
            Direction::Uplink => {
                rows[(i, 1)] = 0.0;
                rows[(i, 2)] = -1.0;
            }
        }
        rows[(i, 3)] = 1.0;
        rhs.push(r.mobile_stamp.as_secs_f64());
    }
    Ok(ObservationMatrix { rows, rhs })
}

/// Count of singular values above `tol` times the largest.
pub fn numeric_rank(m: &DMatrix<f64>, tol: f64) -> usize {
    assert!(tol > 0.0, "rank tolerance must be positive");
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > tol * max).count()
}

pub const DEFAULT_RANK_TOL: f64 = 1e-9;

/// Mean of `r_m - a*s_b` over downlink and of `s_m - a*r_b` over uplink
/// records.
pub fn estimate_combined(
    records: &[ExchangeRecord],
    skew_hat: Skew,
) -> Result<(LocalTime, LocalTime), SyncError> {
    if skew_hat.raw() <= 0 {
        return Err(SyncError::NonPositiveSkew);
    }
    let mean_residual = |dir: Direction| -> Result<LocalTime, SyncError> {
        let mut sum: i128 = 0;
        let mut n: i128 = 0;
        for r in records.iter().filter(|r| r.direction == dir) {
            sum += (r.mobile_stamp - skew_hat.scale(r.base_stamp)).ticks();
            n += 1;
        }
        if n == 0 {
            return Err(SyncError::MissingDirection(dir));
        }
        Ok(LocalTime::from_ticks(div_round(sum, n)))
    };
    Ok((
        mean_residual(Direction::Downlink)?,
        mean_residual(Direction::Uplink)?,
    ))
}

/// Mobile-clock receipt time of a packet the base sends at `s_b`.
pub fn predict_receipt(skew_hat: Skew, combined_down: LocalTime, s_b: RefTime) -> LocalTime {
    skew_hat.scale(s_b) + combined_down
}

/// Base-clock receipt time of a packet the mobile sends at local `s_m`.
pub fn predict_base_receipt(skew_hat: Skew, combined_up: LocalTime, s_m: LocalTime) -> RefTime {
    RefTime::from_nanos(div_round((s_m - combined_up).ticks(), skew_hat.raw() as i128) as i64)
}

/// Mobile send time so that the base receives at `r_b`.
pub fn plan_uplink_send(skew_hat: Skew, combined_up: LocalTime, r_b: RefTime) -> LocalTime {
    skew_hat.scale(r_b) + combined_up
}

/// Delay and offset under the assumption `d_bm == d_mb`.
pub fn solve_symmetric(
    skew_hat: Skew,
    combined_down: LocalTime,
    combined_up: LocalTime,
) -> Result<SymmetricSolution, SyncError> {
    if skew_hat.raw() <= 0 {
        return Err(SyncError::NonPositiveSkew);
    }
    let diff = (combined_down - combined_up).ticks();
    // ticks / (2 * skew_raw) = ns
    let delay_s = diff as f64 / (2.0 * skew_hat.raw() as f64) / NANOS_PER_SEC as f64;
    if delay_s < 0.0 {
        return Err(SyncError::NegativeDelay(delay_s));
    }
    let sum = (combined_down + combined_up).ticks();
    let offset_s = sum as f64 / 2.0 / TICKS_PER_SEC as f64;
    Ok(SymmetricSolution { delay_s, offset_s })
}

/// True iff every record's receipt is predicted within `tol_s` seconds.
pub fn consistency_check(
    records: &[ExchangeRecord],
    skew_hat: Skew,
    combined_down: LocalTime,
    combined_up: LocalTime,
    tol_s: f64,
) -> bool {
    assert!(tol_s > 0.0, "tolerance must be positive");
    let tol_ticks = (tol_s * TICKS_PER_SEC as f64) as i128;
    let tol_ns = (tol_s * NANOS_PER_SEC as f64) as i64;
    records.iter().all(|r| match r.direction {
        Direction::Downlink => {
            let p = predict_receipt(skew_hat, combined_down, r.base_stamp);
            (p - r.mobile_stamp).ticks().abs() <= tol_ticks
        }
        Direction::Uplink => {
            let p = predict_base_receipt(skew_hat, combined_up, r.mobile_stamp);
            (p - r.base_stamp).abs() <= tol_ns
        }
    })
}

/// Forward model for an exchange session, used by tests and the demo.
///
/// Even-numbered packets go downlink, odd packets uplink, one every
/// `spacing_ns`. The base schedules on the reference clock and the mobile
/// on its own clock. `extra_delay` adds per-packet delay on top of `delays`
/// (e.g. an inconsistent interferer). Receive stamps get optional uniform
/// jitter of `±jitter_ns`.
#[derive(Debug, Clone)]
pub struct ExchangeSession {
    pub clock: ClockParams,
    pub delays: PathDelays,
    pub start: RefTime,
    pub spacing_ns: i64,
    pub count: usize,
    pub jitter_ns: i64,
    /// Local time the mobile's uplink schedule counts from. Defaults to the
    /// mobile's reading at `start`.
    pub local_origin: Option<LocalTime>,
}

impl ExchangeSession {
    pub fn new(clock: ClockParams, delays: PathDelays, count: usize) -> Self {
        ExchangeSession {
            clock,
            delays,
            start: RefTime::from_nanos(NANOS_PER_SEC),
            spacing_ns: 1_000_000,
            count,
            jitter_ns: 0,
            local_origin: None,
        }
    }

    pub fn synthesize(&self) -> Vec<ExchangeRecord> {
        self.synthesize_with(&mut rand::rngs::mock::StepRng::new(0, 0), |_, _| 0)
    }

    pub fn synthesize_with<R: Rng, F: Fn(u64, Direction) -> i64>(
        &self,
        rng: &mut R,
        extra_delay_ns: F,
    ) -> Vec<ExchangeRecord> {
        let mut out = Vec::with_capacity(self.count);
        let local_start = self.local_origin.unwrap_or_else(|| local_of(&self.clock, self.start));
        for i in 0..self.count {
            let id = i as u64;
            let offset = self.spacing_ns * i as i64;
            if i % 2 == 0 {
                let s_b = self.start + offset;
                let arrival = s_b + self.delays.d_bm_ns + extra_delay_ns(id, Direction::Downlink);
                let mut r_m = local_of(&self.clock, arrival);
                if self.jitter_ns > 0 {
                    let j = rng.gen_range(-self.jitter_ns as i128 * TICKS_PER_NANO..=self.jitter_ns as i128 * TICKS_PER_NANO);
                    r_m = r_m + LocalTime::from_ticks(j);
                }
                out.push(ExchangeRecord {
                    packet_id: id,
                    direction: Direction::Downlink,
                    base_stamp: s_b,
                    mobile_stamp: r_m,
                });
            } else {
                // mobile schedules on its own clock
                let planned = local_start + LocalTime::from_nanos(offset);
                let t_send = ref_of(&self.clock, planned);
                let s_m = local_of(&self.clock, t_send);
                let mut r_b = t_send + self.delays.d_mb_ns + extra_delay_ns(id, Direction::Uplink);
                if self.jitter_ns > 0 {
                    r_b = r_b + rng.gen_range(-self.jitter_ns..=self.jitter_ns);
                }
                out.push(ExchangeRecord {
                    packet_id: id,
                    direction: Direction::Uplink,
                    base_stamp: r_b,
                    mobile_stamp: s_m,
                });
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn session(a: f64, b: f64, d_bm: i64, d_mb: i64, n: usize) -> Vec<ExchangeRecord> {
        let clock = ClockParams::new(a, b).unwrap();
        ExchangeSession::new(
            clock,
            PathDelays {
                d_bm_ns: d_bm,
                d_mb_ns: d_mb,
            },
            n,
        )
        .synthesize()
    }

    #[test]
    fn skew_of_identical_clocks_is_one() {
        let recs = session(1.0, 0.0, 500, 500, 8);
        let (i, j) = default_skew_pair(&recs, Direction::Uplink).unwrap();
        assert_eq!(estimate_skew(&recs, i, j).unwrap(), Skew::UNITY);
    }

    #[test]
    fn skew_pair_errors() {
        let recs = session(1.0, 0.0, 0, 0, 4);
        assert_eq!(
            estimate_skew(&recs, 0, 1),
            Err(SyncError::DirectionMismatch(0, 1))
        );
        assert_eq!(estimate_skew(&recs, 0, 0), Err(SyncError::DegeneratePair(0, 0)));
        assert_eq!(estimate_skew(&recs, 0, 9), Err(SyncError::IndexOutOfRange(9)));
    }

    #[test]
    fn combined_quantities_trivial_and_offset_only() {
        let recs = session(1.0, 0.0, 0, 0, 6);
        let (cd, cu) = estimate_combined(&recs, Skew::UNITY).unwrap();
        assert_eq!((cd, cu), (LocalTime::ZERO, LocalTime::ZERO));

        let recs = session(1.0, 1e-6, 0, 0, 6);
        let (cd, _) = estimate_combined(&recs, Skew::UNITY).unwrap();
        assert_eq!(cd, LocalTime::from_nanos(1000));
    }

    #[test]
    fn combined_needs_both_directions() {
        let recs: Vec<_> = session(1.0, 0.0, 0, 0, 6)
            .into_iter()
            .filter(|r| r.direction == Direction::Downlink)
            .collect();
        assert_eq!(
            estimate_combined(&recs, Skew::UNITY),
            Err(SyncError::MissingDirection(Direction::Uplink))
        );
    }

    #[test]
    fn prediction_trivial() {
        let p = predict_receipt(Skew::UNITY, LocalTime::ZERO, RefTime::from_secs_f64(7.0));
        assert_eq!(p, LocalTime::from_secs_f64(7.0));
    }

    #[test]
    fn symmetric_trivial_and_negative() {
        let recs = session(1.0, 0.0, 3000, 3000, 8);
        let est = SyncEstimate::from_records(&recs)
            .unwrap()
            .with_symmetric_solution()
            .unwrap();
        let s = est.symmetric_solution.unwrap();
        assert!((s.delay_s - 3e-6).abs() < 1e-18);
        assert!(s.offset_s.abs() < 1e-18);

        let err = solve_symmetric(Skew::UNITY, LocalTime::ZERO, LocalTime::from_nanos(5));
        assert!(matches!(err, Err(SyncError::NegativeDelay(_))));
    }

    #[test]
    fn consistency_vacuous_on_empty() {
        assert!(consistency_check(&[], Skew::UNITY, LocalTime::ZERO, LocalTime::ZERO, 1e-6));
    }

    #[test]
    fn alternating_extra_delay_is_inconsistent() {
        let clock = ClockParams::new(1.0, 0.0).unwrap();
        let sess = ExchangeSession::new(clock, PathDelays::symmetric(500), 40);
        let recs = sess.synthesize_with(&mut rand::rngs::mock::StepRng::new(0, 0), |id, _| {
            if (id / 2) % 2 == 1 {
                10_000
            } else {
                0
            }
        });
        let est = SyncEstimate::from_records(&recs).unwrap();
        assert!(!consistency_check(
            &recs,
            est.skew_hat,
            est.combined_down,
            est.combined_up,
            1e-6
        ));
    }

    #[test]
    fn matrix_layout_and_errors() {
        let recs = session(1.0, 0.0, 0, 0, 4);
        let m = build_observation_matrix(&recs).unwrap();
        assert_eq!(m.rows.nrows(), 4);
        for i in 0..4 {
            assert_eq!(m.rows[(i, 0)], recs[i].base_stamp.as_secs_f64());
            assert_eq!(m.rows[(i, 3)], m.rows[(i, 1)] - m.rows[(i, 2)]);
        }
        // with identity clock and zero delays the stamps on both sides agree
        for (i, r) in recs.iter().enumerate() {
            assert_eq!(m.rhs[i], r.base_stamp.as_secs_f64());
        }
        assert!(matches!(
            build_observation_matrix(&recs[..3]),
            Err(SyncError::InsufficientRecords { needed: 4, got: 3 })
        ));
        assert_eq!(
            build_observation_matrix(&recs[1..]).unwrap_err(),
            SyncError::InsufficientRecords { needed: 4, got: 3 }
        );
        let mut swapped = recs.clone();
        swapped.swap(0, 1);
        assert_eq!(
            build_observation_matrix(&swapped).unwrap_err(),
            SyncError::NotAlternating(0)
        );
    }

    #[test]
    fn rank_of_zero_matrix() {
        assert_eq!(numeric_rank(&DMatrix::zeros(4, 4), DEFAULT_RANK_TOL), 0);
    }

    #[test]
    fn perturbed_matrix_reaches_full_rank() {
        let clock = ClockParams::new(1.001, 2.0).unwrap();
        let recs = ExchangeSession::new(clock, PathDelays::symmetric(1_000), 4).synthesize();
        let mut m = build_observation_matrix(&recs).unwrap().rows;
        assert_eq!(numeric_rank(&m, DEFAULT_RANK_TOL), 3);
        m[(2, 2)] = 0.5;
        assert_eq!(numeric_rank(&m, DEFAULT_RANK_TOL), 4);
    }

    #[test]
    fn record_line_format() {
        let r = ExchangeRecord {
            packet_id: 7,
            direction: Direction::Uplink,
            base_stamp: RefTime::from_nanos(1_000_500),
            mobile_stamp: LocalTime::from_ticks(1_002_443 * TICKS_PER_NANO + 250_000_000_000),
        };
        assert_eq!(r.to_line(), "7,uplink,1002443.25,1000500");
        assert_eq!(ExchangeRecord::parse_line(&r.to_line()).unwrap(), r);
        assert!(ExchangeRecord::parse_line("1,sideways,1,2").is_err());
        assert!(ExchangeRecord::parse_line("1,downlink,1.5,2").is_err());
        assert!(ExchangeRecord::parse_line("1,downlink,1").is_err());
    }

    proptest! {
        #[test]
        fn record_text_round_trip(
            id in 0u64..1_000_000,
            up in any::<bool>(),
            base in -1_000_000_000_000i64..1_000_000_000_000,
            mobile in -(1i128 << 100)..(1i128 << 100),
        ) {
            let r = ExchangeRecord {
                packet_id: id,
                direction: if up { Direction::Uplink } else { Direction::Downlink },
                base_stamp: RefTime::from_nanos(base),
                mobile_stamp: LocalTime::from_ticks(mobile),
            };
            let text = write_records(&[r, r]);
            prop_assert_eq!(read_records(&text).unwrap(), vec![r, r]);
        }

        #[test]
        fn constant_delay_never_moves_skew(
            skew in 990_000_000_000i64..1_010_000_000_000,
            off in 0i64..1_000_000_000,
            d in 0i64..10_000,
            extra_bm in 0i64..10_000,
            extra_mb in 0i64..10_000,
        ) {
            let clock = ClockParams { skew: Skew::from_raw(skew), offset: LocalTime::from_nanos(off) };
            let base = ExchangeSession::new(clock, PathDelays::symmetric(d), 12).synthesize();
            let attacked = ExchangeSession::new(
                clock,
                PathDelays { d_bm_ns: d + extra_bm, d_mb_ns: d + extra_mb },
                12,
            ).synthesize();
            let e0 = SyncEstimate::from_records(&base).unwrap();
            let e1 = SyncEstimate::from_records(&attacked).unwrap();
            prop_assert_eq!(e0.skew_hat, Skew::from_raw(skew));
            prop_assert_eq!(e1.skew_hat, Skew::from_raw(skew));
            prop_assert!(consistency_check(&attacked, e1.skew_hat, e1.combined_down, e1.combined_up, 1e-9));
        }
    }
}
