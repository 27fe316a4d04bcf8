//! Order-preserving map used for deterministic parallel reductions.
//!
//! Results come back in input order, so any reduction performed on them by
//! the caller is identical whether or not threads are used. Setting
//! `QUADMIX_SINGLE_THREAD=1` forces sequential execution.

use std::sync::OnceLock;

pub const SINGLE_THREAD_ENV: &str = "QUADMIX_SINGLE_THREAD";

/// Whether `QUADMIX_SINGLE_THREAD` requests sequential evaluation (read once).
pub fn single_threaded() -> bool {
    static FLAG: OnceLock<bool> = OnceLock::new();
    *FLAG.get_or_init(|| {
        std::env::var(SINGLE_THREAD_ENV)
            .map(|v| !v.is_empty() && v != "0")
            .unwrap_or(false)
    })
}

#[cfg(feature = "parallel")]
pub fn map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    if single_threaded() || items.len() < 2 {
        items.iter().map(f).collect()
    } else {
        items.par_iter().map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    items.iter().map(f).collect()
}
