//! Bounded worker-pool mapping for evaluation.
//!
//! Training is single-threaded by design (one optimizer state, fixed
//! accumulation order), but evaluation embeds thousands of independent
//! samples and parallelizes cleanly. Work is split into contiguous chunks
//! and results are collected in input order, so the output is identical
//! for any worker count.

/// Worker cap: the `SSJDN_THREADS` environment variable when it parses to
/// a positive integer, otherwise the machine's available parallelism.
pub fn max_threads() -> usize {
    if let Ok(raw) = std::env::var("SSJDN_THREADS") {
        if let Ok(n) = raw.trim().parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism()
        .map(usize::from)
        .unwrap_or(1)
}

/// Apply `f` to every item, using up to [`max_threads`] workers. Results
/// are returned in input order regardless of worker count.
pub(crate) fn parallel_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = max_threads().min(items.len());
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }

    let chunk_size = items.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk_size)
            .map(|chunk| {
                let f = &f;
                scope.spawn(move || chunk.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for handle in handles {
            out.extend(handle.join().expect("evaluation worker panicked"));
        }
        out
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maps_in_order_and_completely() {
        let items: Vec<usize> = (0..257).collect();
        let out = parallel_map(&items, |&x| x * x);
        let expected: Vec<usize> = items.iter().map(|&x| x * x).collect();
        assert_eq!(out, expected);
    }

    #[test]
    fn empty_and_single_inputs() {
        let none: Vec<u32> = Vec::new();
        assert!(parallel_map(&none, |&x| x).is_empty());
        assert_eq!(parallel_map(&[7], |&x| x + 1), vec![8]);
    }

    #[test]
    fn worker_cap_is_positive() {
        // Only checks the bound, not scheduling: the environment variable
        // may or may not be set by the caller.
        assert!(max_threads() >= 1);
    }
}
