//! Order-preserving parallel map over scoped threads.

use std::num::NonZeroUsize;

pub const THREADS_ENV: &str = "DENSITY_OCP_THREADS";

/// Worker count: `DENSITY_OCP_THREADS` if set to a positive integer, else the
/// available parallelism.
pub fn thread_count() -> usize {
    let available = std::thread::available_parallelism().map_or(1, NonZeroUsize::get);
    match std::env::var(THREADS_ENV)
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
    {
        Some(n) if n > 0 => n,
        _ => available,
    }
}

/// `items.iter().map(f).collect()`, split into contiguous chunks across threads.
/// Output order never depends on the thread count.
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let threads = thread_count().min(items.len()).max(1);
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                s.spawn(move || part.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order() {
        let xs: Vec<usize> = (0..103).collect();
        assert_eq!(
            par_map(&xs, |x| x * 2),
            xs.iter().map(|x| x * 2).collect::<Vec<_>>()
        );
        assert!(par_map(&Vec::<u8>::new(), |x| *x).is_empty());
    }
}
