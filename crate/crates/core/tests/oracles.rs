//! Sync estimates checked against exact rational arithmetic.

mod common;

use num_rational::Ratio;
use proptest::prelude::*;

use common::rational_rank;
use reveal_core::clock::{local_of, ClockParams, Skew};
use reveal_core::sync::{
    build_observation_matrix, numeric_rank, predict_base_receipt, predict_receipt, ExchangeSession, PathDelays,
    SyncEstimate,
};
use reveal_core::Direction;

fn clock(skew_raw: i64, offset_ns: i64) -> ClockParams {
    let mut c = ClockParams::new(1.0, 0.0).unwrap();
    c.skew = Skew::from_raw(skew_raw);
    c.offset = reveal_core::LocalTime::from_nanos(offset_ns);
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn noiseless_skew_is_exact(
        skew_raw in 950_000_000_000i64..1_050_000_000_000,
        offset_ns in 0i64..100_000_000_000,
        d_bm in 0i64..50_000,
        d_mb in 0i64..50_000,
    ) {
        let c = clock(skew_raw, offset_ns);
        let recs = ExchangeSession::new(c, PathDelays { d_bm_ns: d_bm, d_mb_ns: d_mb }, 40).synthesize();
        let est = SyncEstimate::from_records(&recs).unwrap();
        prop_assert_eq!(est.skew_hat, c.skew);

        // a * d_bm + b, exactly
        let want = Ratio::from_integer(skew_raw as i128 * d_bm as i128 + c.offset.ticks());
        prop_assert_eq!(Ratio::from_integer(est.combined_down.ticks()), want);

        for r in recs.iter().filter(|r| r.direction == Direction::Downlink) {
            prop_assert_eq!(predict_receipt(est.skew_hat, est.combined_down, r.base_stamp), r.mobile_stamp);
        }
        for r in recs.iter().filter(|r| r.direction == Direction::Uplink) {
            prop_assert_eq!(predict_base_receipt(est.skew_hat, est.combined_up, r.mobile_stamp), r.base_stamp);
        }
    }

    #[test]
    fn observation_matrix_never_reaches_full_rank(
        skew in 0.95f64..1.05,
        offset in 0.0f64..100.0,
        d_bm in 0i64..50_000,
        d_mb in 0i64..50_000,
        n in 4usize..30,
    ) {
        let c = ClockParams::new(skew, offset).unwrap();
        let recs = ExchangeSession::new(c, PathDelays { d_bm_ns: d_bm, d_mb_ns: d_mb }, n).synthesize();
        let m = build_observation_matrix(&recs).unwrap();
        prop_assert_eq!(rational_rank(&recs), 3);
        prop_assert_eq!(numeric_rank(&m.rows, 1e-9), 3);
    }
}

#[test]
fn local_clock_is_affine() {
    let c = clock(1_000_025_000_000, 12_500_000_000);
    let t = reveal_core::RefTime::from_nanos(3_000_000_007);
    let ticks = local_of(&c, t).ticks();
    let want = Ratio::new(1_000_025i128, 1_000_000) * Ratio::from_integer(3_000_000_007i128 * 1_000_000_000_000)
        + Ratio::from_integer(12_500_000_000i128 * 1_000_000_000_000);
    assert_eq!(Ratio::from_integer(ticks), want);
}
