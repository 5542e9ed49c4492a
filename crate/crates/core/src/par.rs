//! Order-preserving data-parallel map with a sequential fallback.
//!
//! With the `parallel` feature enabled, `map(.., true, ..)` runs on the rayon
//! pool; otherwise, or with `parallel == false`, items are processed in order
//! on the calling thread. Output order always matches input order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub const THREADS_ENV: &str = "FEDIMPRES_THREADS";

pub fn map<T, R, F>(items: &[T], parallel: bool, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        return items.par_iter().map(f).collect();
    }
    let _ = parallel;
    items.iter().map(f).collect()
}

/// Like [`map`] over `0..n`.
pub fn map_range<R, F>(n: usize, parallel: bool, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = parallel;
    (0..n).map(f).collect()
}

pub fn available() -> bool {
    cfg!(feature = "parallel")
}

/// Size the global pool from `FEDIMPRES_THREADS`, if set. Returns the cap.
pub fn init_from_env() -> Option<usize> {
    let n = std::env::var(THREADS_ENV).ok()?.trim().parse::<usize>().ok()?;
    if n == 0 {
        return None;
    }
    #[cfg(feature = "parallel")]
    {
        // fails only if the pool was already built; keep the existing one then
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Some(n)
}
