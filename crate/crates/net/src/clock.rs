//! Wall-clock nanoseconds for stage stamps.
//!
//! Every [`Clock`] in a process shares one anchor (UNIX time sampled once,
//! advanced by a monotonic `Instant`), so in-process stamps are directly
//! comparable and never step backwards. A per-clock offset lets tests model
//! a skewed remote clock.

use std::sync::OnceLock;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

fn anchor() -> &'static (u64, Instant) {
    static ANCHOR: OnceLock<(u64, Instant)> = OnceLock::new();
    ANCHOR.get_or_init(|| {
        let unix = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default().as_nanos() as u64;
        (unix, Instant::now())
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Clock {
    offset_ns: i64,
}

impl Clock {
    pub fn system() -> Self {
        Self::default()
    }

    /// A clock that reads `offset_ns` ahead of the process clock.
    pub fn with_offset(offset_ns: i64) -> Self {
        Self { offset_ns }
    }

    pub fn offset_ns(&self) -> i64 {
        self.offset_ns
    }

    pub fn now_ns(&self) -> u64 {
        let (unix, start) = *anchor();
        (unix + start.elapsed().as_nanos() as u64).saturating_add_signed(self.offset_ns)
    }

    /// The `Instant` at which this clock reads `t_ns`.
    pub fn instant_at(&self, t_ns: u64) -> Instant {
        let now = self.now_ns();
        let here = Instant::now();
        if t_ns >= now {
            here + Duration::from_nanos(t_ns - now)
        } else {
            here.checked_sub(Duration::from_nanos(now - t_ns)).unwrap_or(here)
        }
    }
}

/// Sleeps until `clock` reads at least `t_ns`.
pub fn sleep_until_ns(clock: &Clock, t_ns: u64) {
    let now = clock.now_ns();
    if t_ns > now {
        std::thread::sleep(Duration::from_nanos(t_ns - now));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clocks_share_an_anchor() {
        let a = Clock::system();
        let b = Clock::with_offset(500_000_000);
        let (ta, tb) = (a.now_ns(), b.now_ns());
        let d = tb as i64 - ta as i64 - 500_000_000;
        assert!(d >= 0 && d < 5_000_000, "{d}");
    }

    #[test]
    fn monotone() {
        let c = Clock::system();
        let mut last = c.now_ns();
        for _ in 0..1000 {
            let t = c.now_ns();
            assert!(t >= last);
            last = t;
        }
    }
}
