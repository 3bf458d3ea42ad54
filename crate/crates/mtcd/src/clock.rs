//! Millisecond timestamps shared by every component.
//!
//! Durations and timestamp chains use the system monotonic clock
//! (`CLOCK_MONOTONIC`), which on Linux is common to all local processes, so
//! dispatcher, executors and clients on one machine produce comparable
//! timelines that are immune to wall-clock adjustments. Wall-clock time is
//! exposed separately for human-readable log lines.

/// Milliseconds on the system-wide monotonic clock.
#[cfg(unix)]
pub fn monotonic_ms() -> u64 {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: ts is a valid out-pointer; CLOCK_MONOTONIC is always available.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_MONOTONIC, &mut ts) };
    assert_eq!(rc, 0, "clock_gettime(CLOCK_MONOTONIC) failed");
    ts.tv_sec as u64 * 1000 + ts.tv_nsec as u64 / 1_000_000
}

#[cfg(not(unix))]
pub fn monotonic_ms() -> u64 {
    use std::sync::OnceLock;
    use std::time::Instant;
    static EPOCH: OnceLock<Instant> = OnceLock::new();
    EPOCH.get_or_init(Instant::now).elapsed().as_millis() as u64
}

/// Milliseconds since the UNIX epoch, for log lines only.
pub fn wall_ms() -> u64 {
    use std::time::{SystemTime, UNIX_EPOCH};
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monotonic_never_goes_backwards() {
        let mut prev = monotonic_ms();
        for _ in 0..1000 {
            let now = monotonic_ms();
            assert!(now >= prev);
            prev = now;
        }
    }

    #[test]
    fn monotonic_advances() {
        let t0 = monotonic_ms();
        std::thread::sleep(std::time::Duration::from_millis(5));
        assert!(monotonic_ms() >= t0 + 4);
    }
}
