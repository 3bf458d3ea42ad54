//! Desk-scale many-task computing stack.
//!
//! A dispatcher service queues tasks and assigns them to executor agents at
//! single-slot granularity over persistent TCP connections; a load-balancing
//! client streams workloads across dispatchers with credit-based flow
//! control; a provisioner acquires blocks of executors with a modeled boot
//! cost; and a benchmark harness measures dispatch throughput, efficiency,
//! and filesystem contention.

pub mod bench;
pub mod client;
pub mod clock;
pub mod dispatcher;
pub mod executor;
pub mod protocol;
pub mod provisioner;
