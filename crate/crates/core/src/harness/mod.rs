//! Event-driven simulation of a scenario, with trace and report output.

mod engine;
mod report;
mod scenario;
mod sched;
mod trace;

pub use engine::{Receipt, Simulation, Transmission, CONTROL_OFFSET_NS, MOBILE_CHECK_NS, SLOT_GUARD_NS};
pub use report::RunReport;
pub use scenario::{ClockSpec, ConfigError, FieldError, ScenarioConfig, TrafficConfig};
pub use trace::{parse_line, Trace, TraceEvent};

use crate::reveal::run_protocol;

/// Runs the scenario's detection policy, then the rest of the run.
pub fn run(cfg: ScenarioConfig, keep_trace: bool) -> Result<(Simulation, RunReport), ConfigError> {
    let mut sim = Simulation::new(cfg, keep_trace)?;
    let started = std::time::Instant::now();
    let policy = sim.config().policy.clone();
    let tests = sim.config().tests;
    run_protocol(&mut sim, &policy, &tests);
    sim.finish_run();
    let mut report = RunReport::of(&sim);
    report.runtime_ms = started.elapsed().as_secs_f64() * 1e3;
    Ok((sim, report))
}
