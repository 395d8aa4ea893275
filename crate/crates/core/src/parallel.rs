//! Ordered parallel map under a configurable worker count.
//!
//! Results are always collected in index order and every reduction in this
//! crate runs sequentially over the collected values, so outputs do not
//! depend on the worker count.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;
use rayon::{ThreadPool, ThreadPoolBuilder};

static OVERRIDE: AtomicUsize = AtomicUsize::new(0);

fn pools() -> &'static Mutex<HashMap<usize, Arc<ThreadPool>>> {
    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<ThreadPool>>>> = OnceLock::new();
    POOLS.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Worker count: the value set by [`set_workers`], else `$WORKERS`, else the
/// number of available cores.
pub fn workers() -> usize {
    match OVERRIDE.load(Ordering::Relaxed) {
        0 => std::env::var("WORKERS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|n| *n > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())),
        n => n,
    }
}

/// Process-wide override; `0` restores the environment default.
pub fn set_workers(n: usize) {
    OVERRIDE.store(n, Ordering::Relaxed);
}

fn pool(n: usize) -> Arc<ThreadPool> {
    let mut map = pools().lock().unwrap_or_else(|e| e.into_inner());
    map.entry(n)
        .or_insert_with(|| {
            Arc::new(
                ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .expect("failed to build worker pool"),
            )
        })
        .clone()
}

/// `(0..n).map(f)` evaluated on the worker pool, in index order.
pub fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    let w = workers();
    if w <= 1 || n < 2 {
        return (0..n).map(f).collect();
    }
    pool(w).install(|| (0..n).into_par_iter().map(f).collect())
}
