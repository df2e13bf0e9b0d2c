//! Efficiency accounting: the mobile efficiency score, closed-form parameter
//! and MAC counts, and the per-block latency lookup table.

mod count;
mod lut;
mod mes;

pub use count::{block_keys, block_macs, block_params, count_macs, count_params, reachable_keys, Macs};
pub use lut::{build_latency_table, median_time, Device, LatencyEntry, LatencyTable, Provenance};
pub use mes::{compute_mes, MesConfig, MetricSpec, LATENCY, SIZE};
