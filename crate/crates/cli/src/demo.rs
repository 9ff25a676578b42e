use std::io::Write;

use reveal_core::clock::{local_of, ref_of, ClockParams, LocalTime, RefTime};
use reveal_core::sync::{
    build_observation_matrix, estimate_skew, numeric_rank, ExchangeSession, PathDelays, DEFAULT_RANK_TOL,
};
use reveal_core::SyncEstimate;

/// Base receipt of an uplink the mobile sends when its clock reads `local`.
fn uplink_receipt(clock: &ClockParams, local: LocalTime, d_mb_ns: i64) -> RefTime {
    ref_of(clock, local) + d_mb_ns
}

pub fn print(w: &mut impl Write) -> anyhow::Result<()> {
    writeln!(w, "skew recovery (200 noiseless exchanges, 500 ns each way)")?;
    for skew in [0.9935607, 1.002443, 1.003142] {
        let clock = ClockParams::new(skew, 7.25)?;
        let recs = ExchangeSession::new(clock, PathDelays::symmetric(500), 200).synthesize();
        let est = estimate_skew(&recs, 0, recs.len() - 2)?;
        writeln!(w, "  configured {skew:.7}  estimated {est}  rel err {:.1e}", (est.as_f64() - skew).abs() / skew)?;
    }

    let clock = ClockParams::new(1.000025, 12.5)?;
    let recs = ExchangeSession::new(clock, PathDelays { d_bm_ns: 700, d_mb_ns: 300 }, 4).synthesize();
    let m = build_observation_matrix(&recs)?;
    let est = SyncEstimate::from_records(&recs)?;
    writeln!(w)?;
    writeln!(w, "observation matrix over (a, a*d_bm, a*d_mb, b), 4 exchanges")?;
    for r in m.rows.row_iter() {
        writeln!(w, "  [{}]", r.iter().map(|x| format!("{x:>16.9}")).collect::<Vec<_>>().join(" "))?;
    }
    writeln!(w, "  rank {} of {} unknowns", numeric_rank(&m.rows, DEFAULT_RANK_TOL), m.rows.ncols())?;
    writeln!(w, "  solvable: skew {} and a*d_bm + b = {}", est.skew_hat, est.combined_down)?;

    writeln!(w)?;
    writeln!(w, "ambiguity: uplink sent at mobile time 100 s")?;
    let sent = LocalTime::from_nanos(100_000_000_000);
    let pairs = [(0.0, 1_000i64), (-1e-6, 0)];
    let mut seen = Vec::new();
    for (b, d_mb) in pairs {
        let c = ClockParams::new(1.0, b)?;
        let r = uplink_receipt(&c, sent, d_mb);
        writeln!(w, "  b = {:>2} us, d_mb = {} us  ->  base receipt {:.9} s", b * 1e6, d_mb / 1_000, r.as_secs_f64())?;
        seen.push(r);
    }
    writeln!(w, "  indistinguishable: {}", seen[0] == seen[1])?;

    writeln!(w)?;
    writeln!(w, "ambiguity: full exchange with skew 1")?;
    let session = |b: f64, d_bm_ns: i64, d_mb_ns: i64| -> anyhow::Result<_> {
        let mut s = ExchangeSession::new(ClockParams::new(1.0, b)?, PathDelays { d_bm_ns, d_mb_ns }, 16);
        s.start = RefTime::from_nanos(100_000_000_000);
        s.local_origin = Some(local_of(&ClockParams::new(1.0, 0.0)?, s.start));
        Ok(s.synthesize())
    };
    let a = session(1e-6, 0, 1_000)?;
    let b = session(0.0, 1_000, 0)?;
    writeln!(w, "  (d_bm = 0, b = 1e-6) vs (d_bm = 1e-6, b = 0): {} records, identical: {}", a.len(), a == b)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    #[test]
    fn demo_reports_rank_three_and_identical_records() {
        let mut out = Vec::new();
        super::print(&mut out).unwrap();
        let s = String::from_utf8(out).unwrap();
        assert!(s.contains("rank 3 of 4 unknowns"));
        assert!(s.contains("base receipt 100.000001000 s"));
        assert_eq!(s.matches("indistinguishable: true").count(), 1);
        assert!(s.contains("identical: true"));
    }
}
