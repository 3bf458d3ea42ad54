//! Virtual-clock run simulation.
//!
//! The event clock is integer milliseconds, so a zero-overhead run of equal
//! tasks finishes at exactly `ceil(W/P) * t` — no float drift between the
//! simulated makespan and the ideal one.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

/// Simulate a FIFO run of `num_tasks` equal tasks on `slots` free slots and
/// return the virtual makespan in ms. `overhead_ms` models the per-task
/// dispatch/fork cost each slot pays before the task's payload runs.
pub fn simulate_fifo_run(
    slots: u64,
    num_tasks: u64,
    task_length_ms: u64,
    overhead_ms: u64,
) -> u64 {
    assert!(slots >= 1);
    if num_tasks == 0 {
        return 0;
    }
    let mut free_at: BinaryHeap<Reverse<u64>> = (0..slots).map(|_| Reverse(0u64)).collect();
    let mut makespan = 0u64;
    for _ in 0..num_tasks {
        let Reverse(start) = free_at.pop().expect("slots >= 1");
        let finish = start + overhead_ms + task_length_ms;
        makespan = makespan.max(finish);
        free_at.push(Reverse(finish));
    }
    makespan
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_overhead_makespan_is_waves_times_length() {
        // 640 tasks over 64 slots = 10 waves.
        assert_eq!(simulate_fifo_run(64, 640, 4_000, 0), 40_000);
        // Partial last wave still costs a full task length.
        assert_eq!(simulate_fifo_run(64, 641, 4_000, 0), 44_000);
        assert_eq!(simulate_fifo_run(64, 63, 4_000, 0), 4_000);
    }

    #[test]
    fn overhead_adds_per_wave() {
        assert_eq!(simulate_fifo_run(4, 8, 1_000, 50), 2_100);
    }

    #[test]
    fn empty_run_takes_no_time() {
        assert_eq!(simulate_fifo_run(8, 0, 1_000, 10), 0);
    }
}
