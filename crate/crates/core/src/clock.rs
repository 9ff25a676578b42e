//! Virtual clocks.
//!
//! The base station owns the reference timeline. Every other node keeps a
//! local clock related to it by `local = skew * reference + offset`.
//!
//! Reference instants are integer nanoseconds. Local instants use a much
//! finer tick (10^-21 s) and skews are fixed-point with 12 fractional
//! digits, so that `skew * t + offset` is computed exactly for every
//! nanosecond-aligned reference instant. Float conversions happen only at
//! the API boundary.

use std::fmt;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NANOS_PER_SEC: i64 = 1_000_000_000;
/// Local ticks per nanosecond.
pub const TICKS_PER_NANO: i128 = 1_000_000_000_000;
pub const TICKS_PER_SEC: i128 = TICKS_PER_NANO * NANOS_PER_SEC as i128;
/// Fixed-point denominator of [`Skew`].
pub const SKEW_ONE: i64 = 1_000_000_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClockError {
    #[error("skew must be positive, got {0}")]
    NonPositiveSkew(f64),
    #[error("skew {skew} outside plausibility band [{lo}, {hi}]")]
    SkewOutOfBand { skew: f64, lo: f64, hi: f64 },
    #[error("value {0} is not finite")]
    NotFinite(f64),
}

/// Instant on the reference (base-station) timeline, in nanoseconds.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct RefTime(i64);

impl RefTime {
    pub const ZERO: RefTime = RefTime(0);

    pub const fn from_nanos(ns: i64) -> Self {
        RefTime(ns)
    }

    pub const fn nanos(self) -> i64 {
        self.0
    }

    pub fn from_secs_f64(s: f64) -> Self {
        RefTime((s * NANOS_PER_SEC as f64).round() as i64)
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / NANOS_PER_SEC as f64
    }

    pub const fn plus_nanos(self, ns: i64) -> Self {
        RefTime(self.0 + ns)
    }
}

impl Add<i64> for RefTime {
    type Output = RefTime;
    fn add(self, ns: i64) -> RefTime {
        RefTime(self.0 + ns)
    }
}

impl Sub<i64> for RefTime {
    type Output = RefTime;
    fn sub(self, ns: i64) -> RefTime {
        RefTime(self.0 - ns)
    }
}

impl Sub for RefTime {
    type Output = i64;
    fn sub(self, rhs: RefTime) -> i64 {
        self.0 - rhs.0
    }
}

impl fmt::Display for RefTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

/// Reading of a slave clock, in local ticks (10^-21 s).
///
/// Also used for offsets and for the combined quantities the sync estimator
/// produces, all of which live on the slave's time scale.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct LocalTime(i128);

impl LocalTime {
    pub const ZERO: LocalTime = LocalTime(0);

    pub const fn from_ticks(ticks: i128) -> Self {
        LocalTime(ticks)
    }

    pub const fn ticks(self) -> i128 {
        self.0
    }

    pub const fn from_nanos(ns: i64) -> Self {
        LocalTime(ns as i128 * TICKS_PER_NANO)
    }

    pub fn from_secs_f64(s: f64) -> Self {
        LocalTime((s * TICKS_PER_SEC as f64).round() as i128)
    }

    pub fn as_secs_f64(self) -> f64 {
        // split to keep the integer part exact before the float division
        let whole = self.0.div_euclid(TICKS_PER_SEC);
        let frac = self.0.rem_euclid(TICKS_PER_SEC);
        whole as f64 + frac as f64 / TICKS_PER_SEC as f64
    }

    pub fn as_nanos_f64(self) -> f64 {
        let whole = self.0.div_euclid(TICKS_PER_NANO);
        let frac = self.0.rem_euclid(TICKS_PER_NANO);
        whole as f64 + frac as f64 / TICKS_PER_NANO as f64
    }
}

impl Add for LocalTime {
    type Output = LocalTime;
    fn add(self, rhs: LocalTime) -> LocalTime {
        LocalTime(self.0 + rhs.0)
    }
}

impl Sub for LocalTime {
    type Output = LocalTime;
    fn sub(self, rhs: LocalTime) -> LocalTime {
        LocalTime(self.0 - rhs.0)
    }
}

impl fmt::Display for LocalTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.12}s(local)", self.as_secs_f64())
    }
}

/// Clock rate ratio in units of 10^-12.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Skew(i64);

impl Skew {
    pub const UNITY: Skew = Skew(SKEW_ONE);

    pub const fn from_raw(raw: i64) -> Self {
        Skew(raw)
    }

    pub const fn raw(self) -> i64 {
        self.0
    }

    pub fn from_f64(a: f64) -> Self {
        Skew((a * SKEW_ONE as f64).round() as i64)
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / SKEW_ONE as f64
    }

    /// `skew * t` on the local tick scale, exact.
    pub fn scale(self, t: RefTime) -> LocalTime {
        LocalTime(self.0 as i128 * t.nanos() as i128)
    }

    /// `skew * d` for a reference-time duration in nanoseconds, exact.
    pub fn scale_nanos(self, ns: i64) -> LocalTime {
        LocalTime(self.0 as i128 * ns as i128)
    }
}

impl fmt::Display for Skew {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.12}", self.as_f64())
    }
}

/// Accepted skew range. The observed skews of real hardware sit far inside
/// the default band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkewBand {
    pub lo: f64,
    pub hi: f64,
}

impl Default for SkewBand {
    fn default() -> Self {
        SkewBand { lo: 0.9, hi: 1.1 }
    }
}

/// Skew and offset of a slave clock against the reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClockParams {
    pub skew: Skew,
    /// Local reading at reference instant zero.
    pub offset: LocalTime,
}

impl Default for ClockParams {
    fn default() -> Self {
        ClockParams::IDENTITY
    }
}

impl ClockParams {
    pub const IDENTITY: ClockParams = ClockParams {
        skew: Skew::UNITY,
        offset: LocalTime::ZERO,
    };

    /// Builds params from float seconds, checked against the default band.
    pub fn new(skew: f64, offset_secs: f64) -> Result<Self, ClockError> {
        Self::with_band(skew, offset_secs, SkewBand::default())
    }

    pub fn with_band(skew: f64, offset_secs: f64, band: SkewBand) -> Result<Self, ClockError> {
        if !skew.is_finite() {
            return Err(ClockError::NotFinite(skew));
        }
        if !offset_secs.is_finite() {
            return Err(ClockError::NotFinite(offset_secs));
        }
        let params = ClockParams {
            skew: Skew::from_f64(skew),
            offset: LocalTime::from_secs_f64(offset_secs),
        };
        params.validate(band)?;
        Ok(params)
    }

    pub fn validate(&self, band: SkewBand) -> Result<(), ClockError> {
        let a = self.skew.as_f64();
        if self.skew.raw() <= 0 {
            return Err(ClockError::NonPositiveSkew(a));
        }
        if a < band.lo || a > band.hi {
            return Err(ClockError::SkewOutOfBand {
                skew: a,
                lo: band.lo,
                hi: band.hi,
            });
        }
        Ok(())
    }
}

/// Local reading of a clock with `params` at reference instant `t`.
pub fn local_of(params: &ClockParams, t: RefTime) -> LocalTime {
    params.skew.scale(t) + params.offset
}

/// Reference instant at which the clock reads `t`, rounded to the nearest
/// nanosecond (ties away from zero).
pub fn ref_of(params: &ClockParams, t: LocalTime) -> RefTime {
    let num = (t - params.offset).ticks();
    RefTime::from_nanos(div_round(num, params.skew.raw() as i128) as i64)
}

/// Integer division rounded to nearest, ties away from zero. `den > 0`.
pub(crate) fn div_round(num: i128, den: i128) -> i128 {
    debug_assert!(den > 0);
    let q = num.div_euclid(den);
    let r = num.rem_euclid(den);
    if 2 * r >= den {
        if num >= 0 || 2 * r > den {
            q + 1
        } else {
            q
        }
    } else {
        q
    }
}
