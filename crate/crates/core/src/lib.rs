//! Clock sync and relay-attack detection on a simulated scheduled link.

pub mod clock;
pub mod endpoints;
pub mod harness;
pub mod medium;
pub mod mim;
pub mod reveal;
pub mod sync;

pub use clock::{local_of, ref_of, ClockParams, LocalTime, RefTime, Skew};
pub use endpoints::{FrequencyPlan, Grant, NodeStats, RetuneCommand, RetuneWhich};
pub use harness::{run, ConfigError, FieldError, RunReport, ScenarioConfig, Simulation};
pub use medium::{ChannelConfig, FrequencyHz, LinkMetrics, NodeId, Packet, PacketKind, Reachability};
pub use mim::{ConflictPolicy, MimConfig, MimMode};
pub use reveal::{DetectionVerdict, InconclusiveReason, LinkScheduler, ProtocolPolicy, TestConfigs, TestKind, Verdict};
pub use sync::{Direction, ExchangeRecord, SyncEstimate};
