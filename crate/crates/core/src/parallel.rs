//! Worker-thread cap for row-parallel operator kernels.
//!
//! Defaults to one thread. Parallel kernels split work by output rows and
//! accumulate each row in a fixed order, so results do not depend on the
//! schedule.

use std::sync::atomic::{AtomicUsize, Ordering};

static THREADS: AtomicUsize = AtomicUsize::new(1);

/// Environment variable read by [`init_from_env`].
pub const THREADS_ENV: &str = "KPX_THREADS";

pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

/// Sets the thread cap. The global rayon pool can only be sized once per
/// process, so later calls only change whether the parallel path is taken.
pub fn set_threads(n: usize) {
    let n = n.max(1);
    if n > 1 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    THREADS.store(n, Ordering::Relaxed);
}

pub fn init_from_env() {
    if let Some(n) = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
    {
        set_threads(n);
    }
}

pub(crate) fn enabled(rows: usize) -> bool {
    threads() > 1 && rows >= 64
}
