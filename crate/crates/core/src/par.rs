//! Order-preserving data parallelism. With the `parallel` feature the work
//! runs on a rayon pool sized by `HGM_THREADS` (all cores when unset);
//! without it everything runs on the calling thread.

/// Worker count requested through `HGM_THREADS`, if any.
pub fn requested_threads() -> Option<usize> {
    std::env::var("HGM_THREADS").ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// `f(0), …, f(n-1)` evaluated in order on the calling thread.
pub fn map_sequential<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// `f(0), …, f(n-1)` evaluated in parallel; results come back in index
/// order, so the output matches [`map_sequential`] exactly.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    let run = || (0..n).into_par_iter().map(&f).collect();
    match requested_threads() {
        Some(threads) => match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            Ok(pool) => pool.install(run),
            Err(_) => run(),
        },
        None => run(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_sequential(n, f)
}
