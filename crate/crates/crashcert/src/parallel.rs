//! Deterministic data parallelism.
//!
//! Work items are mapped into an index-ordered buffer (each worker fills a
//! contiguous chunk) and reductions run over that buffer in a fixed pairwise
//! order, so results are bit-identical for any worker count.

/// Resolve a worker-count request: `0` means "auto" (the `CRASHCERT_THREADS`
/// environment variable, falling back to the machine parallelism).
pub fn resolve_workers(requested: usize) -> usize {
    if requested > 0 {
        return requested;
    }
    if let Ok(v) = std::env::var("CRASHCERT_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n > 0 {
                return n;
            }
        }
    }
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Evaluate `f(0), ..., f(n-1)` on `workers` threads into an index-ordered vector.
pub fn parallel_map<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send + Default + Clone,
    F: Fn(usize) -> T + Sync,
{
    let workers = resolve_workers(workers).min(n.max(1));
    let mut out = vec![T::default(); n];
    if n == 0 {
        return out;
    }
    if workers <= 1 {
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = f(i);
        }
        return out;
    }
    let chunk = n.div_ceil(workers);
    let fref = &f;
    std::thread::scope(|scope| {
        for (w, slice) in out.chunks_mut(chunk).enumerate() {
            let start = w * chunk;
            scope.spawn(move || {
                for (off, slot) in slice.iter_mut().enumerate() {
                    *slot = fref(start + off);
                }
            });
        }
    });
    out
}

/// Pairwise (tree) summation; deterministic for a fixed input ordering and
/// with error growth O(log n) instead of O(n).
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BASE: usize = 32;
    if xs.len() <= BASE {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Sample mean via pairwise summation.
pub fn pairwise_mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    pairwise_sum(xs) / xs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_is_worker_invariant() {
        let f = |i: usize| (i as f64).sin();
        let one = parallel_map(1000, 1, f);
        let two = parallel_map(1000, 2, f);
        let eight = parallel_map(1000, 8, f);
        assert_eq!(one, two);
        assert_eq!(one, eight);
    }

    #[test]
    fn pairwise_sum_matches_exact_on_integers() {
        let xs: Vec<f64> = (0..1537).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), (xs.len() * (xs.len() - 1) / 2) as f64);
    }
}
