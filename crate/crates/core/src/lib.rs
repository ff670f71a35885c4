//! Distributed dash-cam video analytics over a master/worker fleet.
//!
//! A master downloads paired outer/inner workloads from a dash-cam source,
//! schedules them across connected workers, and accounts for where every
//! millisecond of each video's turnaround went.

pub mod analysis;
pub mod config;
pub mod dashcam;
pub mod ledger;
pub mod metrics;
pub mod model;
pub mod node;
pub mod result;
pub mod scheduler;
pub mod segment;
pub mod wire;
pub mod workload;
