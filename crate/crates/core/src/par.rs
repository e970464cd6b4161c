//! Scoped-thread helpers.
//!
//! Work is split into contiguous index chunks and results are collected by
//! index, so the output is identical for any worker count. `MQ_THREADS`
//! caps the pool.

/// Worker count: `MQ_THREADS` if set, else available parallelism.
pub fn worker_count() -> usize {
    if let Ok(v) = std::env::var("MQ_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Applies `f` to every index in `0..n` and returns the results in index
/// order. Chunking is by contiguous ranges; reductions done by the caller
/// over the returned Vec are therefore deterministic.
pub fn map_indexed<R, F>(n: usize, threads: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync,
{
    let threads = threads.max(1).min(n.max(1));
    if threads <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let mut out: Vec<Option<R>> = Vec::with_capacity(n);
    out.resize_with(n, || None);
    let chunk = n.div_ceil(threads);
    std::thread::scope(|scope| {
        for (t, slot) in out.chunks_mut(chunk).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (i, s) in slot.iter_mut().enumerate() {
                    *s = Some(f(t * chunk + i));
                }
            });
        }
    });
    out.into_iter()
        .map(|r| r.expect("worker finished"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn results_arrive_in_index_order_for_any_worker_count() {
        for threads in [1usize, 2, 3, 7, 16] {
            let got = map_indexed(23, threads, |i| i * i);
            let want: Vec<usize> = (0..23).map(|i| i * i).collect();
            assert_eq!(got, want, "threads={threads}");
        }
    }

    #[test]
    fn empty_and_single_inputs() {
        assert_eq!(map_indexed(0, 4, |i| i), Vec::<usize>::new());
        assert_eq!(map_indexed(1, 4, |i| i + 1), vec![1]);
    }
}
