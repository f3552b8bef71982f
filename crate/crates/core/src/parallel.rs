//! Order-preserving parallel map over replication indices.
//!
//! With the `parallel` feature the work runs on a rayon pool whose size is
//! capped by `DEBIAS_THREADS`; results always come back in index order so
//! reductions are independent of the thread count.

pub const THREADS_ENV: &str = "DEBIAS_THREADS";

/// Worker count requested through the environment, if any.
pub fn requested_threads() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse::<usize>().ok().filter(|&t| t > 0)
}

#[cfg(feature = "parallel")]
fn pool() -> &'static rayon::ThreadPool {
    use std::sync::OnceLock;
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(t) = requested_threads() {
            b = b.num_threads(t);
        }
        b.build().expect("failed to build thread pool")
    })
}

#[cfg(feature = "parallel")]
pub fn map<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    pool().install(|| (0..len).into_par_iter().map(f).collect())
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..len).map(f).collect()
}
