//! Worker threads for data preparation.
//!
//! `VOXKD_THREADS` caps the threads used to realize and voxelize scenes
//! (default: all available cores). Results are collected in input order,
//! so the thread count never changes any output. The training loop itself
//! is sequential by design: optimizer updates form a dependency chain, and
//! reproducibility down to the bit is part of the contract.

use anyhow::{bail, Context, Result};

pub const THREADS_ENV: &str = "VOXKD_THREADS";

/// Worker count from the environment, or the machine's parallelism.
pub fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(raw) => {
            let n: usize = raw
                .trim()
                .parse()
                .ok()
                .filter(|&n| n >= 1)
                .with_context(|| format!("{THREADS_ENV} must be a positive integer, got {raw:?}"))?;
            Ok(n)
        }
        Err(std::env::VarError::NotPresent) => {
            Ok(std::thread::available_parallelism().map_or(1, |n| n.get()))
        }
        Err(std::env::VarError::NotUnicode(_)) => bail!("{THREADS_ENV} is not valid UTF-8"),
    }
}

/// Maps `f` over `items` on up to `threads` workers, preserving order.
pub fn par_map<T, U, F>(items: Vec<T>, threads: usize, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync,
{
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.into_iter().map(f).collect();
    }

    // Contiguous chunks keep reassembly a plain concatenation.
    let chunk_len = items.len().div_ceil(threads);
    let mut chunks: Vec<Vec<T>> = Vec::with_capacity(threads);
    let mut items = items.into_iter();
    loop {
        let chunk: Vec<T> = items.by_ref().take(chunk_len).collect();
        if chunk.is_empty() {
            break;
        }
        chunks.push(chunk);
    }

    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|chunk| scope.spawn(move || chunk.into_iter().map(f).collect::<Vec<U>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}
