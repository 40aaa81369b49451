//! Execution mode: single-threaded by default, optionally a rayon pool.
//!
//! Parallel work is split per batch entry. Every output element is still
//! produced by one worker with the same summation order, and cross-sample
//! reductions are folded in sample order afterwards, so results are
//! bit-identical to the single-threaded mode.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;

static THREADS: AtomicUsize = AtomicUsize::new(1);
static POOL: Mutex<Option<(usize, Arc<rayon::ThreadPool>)>> = Mutex::new(None);

/// Set the worker count. `1` (the default) disables the pool.
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::SeqCst);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::SeqCst)
}

fn pool(n: usize) -> Arc<rayon::ThreadPool> {
    let mut guard = POOL.lock().unwrap_or_else(|e| e.into_inner());
    match &*guard {
        Some((size, pool)) if *size == n => pool.clone(),
        _ => {
            let pool = Arc::new(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .expect("thread pool"),
            );
            *guard = Some((n, pool.clone()));
            pool
        }
    }
}

/// `(0..n).map(f)`, run on the pool when more than one thread is configured.
pub(crate) fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    let t = threads();
    if t <= 1 || n <= 1 {
        (0..n).map(f).collect()
    } else {
        pool(t).install(|| (0..n).into_par_iter().map(f).collect())
    }
}

/// Run `f` on each `chunk_len`-sized chunk of `data` together with its index.
pub(crate) fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    let t = threads();
    if t <= 1 {
        data.chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    } else {
        pool(t).install(|| {
            data.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c))
        });
    }
}
