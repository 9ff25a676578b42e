use std::io::Write;

use clap::ValueEnum;
use rayon::prelude::*;
use serde::Serialize;

use reveal_core::{run, ConfigError, ScenarioConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Param {
    Seed,
    Skew,
    OffsetS,
    SnrJitterDb,
    JitterNs,
    PropDelayNs,
    SensingBandwidthMhz,
    BurstTtis,
}

impl Param {
    fn apply(self, cfg: &mut ScenarioConfig, v: f64) {
        match self {
            Param::Seed => cfg.seed = v as u64,
            Param::Skew => cfg.clock.skew = v,
            Param::OffsetS => cfg.clock.offset_s = v,
            Param::SnrJitterDb => cfg.channel.snr_jitter_db = v,
            Param::JitterNs => cfg.traffic.stamp_jitter_ns = v as i64,
            Param::PropDelayNs => cfg.channel.prop_delay_ns = v as i64,
            Param::SensingBandwidthMhz => {
                if let Some(m) = cfg.mim.as_mut() {
                    m.sensing_bandwidth_mhz = v as u64;
                }
            }
            Param::BurstTtis => cfg.tests.half_duplex.burst_ttis = v as u32,
        }
    }

    fn name(self) -> String {
        self.to_possible_value().map(|p| p.get_name().to_string()).unwrap_or_default()
    }
}

/// One CSV row per run.
#[derive(Debug, Serialize)]
pub struct Row {
    pub scenario: String,
    pub param: String,
    pub value: f64,
    pub seed: u64,
    pub verdict: String,
    pub detected: bool,
    pub timing_advance_us: Option<f64>,
    pub skew_hat: Option<f64>,
    pub downlink_per: f64,
    pub uplink_per: f64,
    pub mim_forwards: u64,
    pub mim_drops: u64,
}

/// Parses `a..b`, `a..=b`, `start:step:end` (inclusive) or `x,y,z`.
pub fn parse_range(s: &str) -> Result<Vec<f64>, String> {
    let num = |t: &str| t.trim().parse::<f64>().map_err(|_| format!("bad number {t:?} in range {s:?}"));
    let out: Vec<f64> = if let Some((a, b)) = s.split_once("..=") {
        let (a, b) = (num(a)? as i64, num(b)? as i64);
        (a..=b).map(|x| x as f64).collect()
    } else if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (num(a)? as i64, num(b)? as i64);
        (a..b).map(|x| x as f64).collect()
    } else if s.contains(':') {
        let p: Vec<&str> = s.split(':').collect();
        let [a, step, b] = p[..] else {
            return Err(format!("expected start:step:end, got {s:?}"));
        };
        let (a, step, b) = (num(a)?, num(step)?, num(b)?);
        if step <= 0.0 {
            return Err("step must be positive".into());
        }
        let n = ((b - a) / step + 1e-9).floor();
        if n < 0.0 {
            return Err(format!("empty range {s:?}"));
        }
        (0..=n as u64).map(|i| a + step * i as f64).collect()
    } else {
        s.split(',').map(num).collect::<Result<_, _>>()?
    };
    if out.is_empty() {
        return Err(format!("empty range {s:?}"));
    }
    Ok(out)
}

pub fn run_all(base: &ScenarioConfig, param: Param, values: &[f64]) -> Result<Vec<Row>, ConfigError> {
    let cfgs: Vec<ScenarioConfig> = values
        .iter()
        .map(|&v| {
            let mut c = base.clone();
            param.apply(&mut c, v);
            c.validate().map(|_| c)
        })
        .collect::<Result<_, _>>()?;
    let name = param.name();
    Ok(cfgs
        .into_par_iter()
        .zip(values.par_iter())
        .map(|(c, &value)| {
            let (_, r) = run(c, false).expect("validated");
            let overall = r.overall();
            Row {
                scenario: r.scenario.clone(),
                param: name.clone(),
                value,
                seed: r.seed,
                verdict: overall.map_or("none".into(), |v| format!("{v:?}")),
                detected: overall.is_some_and(|v| v.is_detected()),
                timing_advance_us: r.timing_advance_us,
                skew_hat: r.sync.as_ref().map(|s| s.skew_hat.as_f64()),
                downlink_per: r.downlink.per,
                uplink_per: r.uplink.per,
                mim_forwards: r.mim_forwards,
                mim_drops: r.mim_drops,
            }
        })
        .collect())
}

pub fn write_csv(w: impl Write, rows: &[Row]) -> anyhow::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges() {
        assert_eq!(parse_range("1..4").unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(parse_range("1..=3").unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(parse_range("0.99:0.01:1.01").unwrap().len(), 3);
        assert_eq!(parse_range("5,7").unwrap(), vec![5.0, 7.0]);
        assert!(parse_range("3..3").is_err());
        assert!(parse_range("1:0:2").is_err());
        assert!(parse_range("x").is_err());
    }
}
