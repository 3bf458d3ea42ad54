//! Workload client: ingests task files, balances submission across many
//! dispatchers with credit-based flow control, and collects results into a
//! run log suitable for timeline reconstruction.

mod run;
mod workload;

pub use run::{
    submit_all, ClientError, ClientOptions, DispatcherHandle, RunHandle, RunSummary,
};
pub use workload::{load_workload, sleep_workload, write_workload, Workload, WorkloadError};
