//! Bounded fan-out for independent per-image work.
//!
//! The `DENOISE_THREADS` environment variable caps worker threads; 0 or 1
//! selects the single-threaded deterministic mode. Tasks must be pure, so
//! results are identical for every thread count; only wall time changes.

pub const THREADS_ENV: &str = "DENOISE_THREADS";

/// Effective thread cap from the environment (>= 1).
pub fn thread_limit() -> usize {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(0) | Err(_) => 1,
            Ok(n) => n,
        },
        Err(_) => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    }
}

/// Applies `f` to every item, fanning out over at most `thread_limit()`
/// threads. Results come back in input order.
pub fn map_limited<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let n = items.len();
    let n_threads = thread_limit().min(n.max(1));
    if n_threads <= 1 {
        return items.into_iter().map(f).collect();
    }
    let chunk = n.div_ceil(n_threads);
    let mut slots: Vec<Option<R>> = (0..n).map(|_| None).collect();
    let mut item_chunks: Vec<Vec<T>> = Vec::new();
    let mut iter = items.into_iter();
    loop {
        let batch: Vec<T> = iter.by_ref().take(chunk).collect();
        if batch.is_empty() {
            break;
        }
        item_chunks.push(batch);
    }
    std::thread::scope(|scope| {
        let f = &f;
        for (batch, slot) in item_chunks.into_iter().zip(slots.chunks_mut(chunk)) {
            scope.spawn(move || {
                for (item, s) in batch.into_iter().zip(slot.iter_mut()) {
                    *s = Some(f(item));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("slot filled")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maps_in_order() {
        let out = map_limited((0..100).collect(), |v: i32| v * 2);
        assert_eq!(out, (0..100).map(|v| v * 2).collect::<Vec<_>>());
    }

    #[test]
    fn empty_input() {
        let out: Vec<i32> = map_limited(Vec::<i32>::new(), |v| v);
        assert!(out.is_empty());
    }
}
