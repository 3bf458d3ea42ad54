//! Task dispatch service: accepts batches from clients, schedules onto free
//! executor slots, detects failures through heartbeats, reschedules lost
//! tasks, and suspends executors that fail too often.

mod server;
mod state;

pub use server::{serve, ServerConfig, ServerHandle};
pub use state::{
    ClientId, DispatcherConfig, DispatcherState, DispatcherStats, Effect, ExecutorRecord,
    ExecutorState, TaskEvent,
};
