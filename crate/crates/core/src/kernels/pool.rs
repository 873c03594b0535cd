use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Fixed-size worker pool with a static contiguous partition of index ranges.
///
/// Worker `w` of `T` always receives `[w*len/T, (w+1)*len/T)`, so every index
/// belongs to exactly one worker and the assignment depends only on `(len, T)`.
#[derive(Clone)]
pub struct WorkerPool {
    threads: usize,
    inner: Option<Arc<rayon::ThreadPool>>,
}

impl std::fmt::Debug for WorkerPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WorkerPool").field("threads", &self.threads).finish()
    }
}

impl Default for WorkerPool {
    fn default() -> Self {
        Self::single()
    }
}

impl WorkerPool {
    pub fn new(threads: usize) -> Result<Self> {
        if threads == 0 {
            return Err(Error::InvalidArgument("worker count must be >= 1".into()));
        }
        if threads == 1 {
            return Ok(Self::single());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .thread_name(|i| format!("qdiff-worker-{i}"))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?;
        Ok(Self { threads, inner: Some(Arc::new(pool)) })
    }

    /// Runs everything inline on the calling thread.
    pub fn single() -> Self {
        Self { threads: 1, inner: None }
    }

    /// One worker per logical core.
    pub fn with_available_parallelism() -> Self {
        let n = std::thread::available_parallelism().map_or(1, |n| n.get());
        Self::new(n).unwrap_or_else(|_| Self::single())
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    /// Range owned by worker `worker` when `len` indices are split `parts` ways.
    pub fn partition_range(len: usize, parts: usize, worker: usize) -> Range<usize> {
        let start = worker * len / parts;
        let end = (worker + 1) * len / parts;
        start..end
    }

    /// Non-empty ranges for this pool's workers, in worker order.
    pub fn partition(&self, len: usize) -> Vec<Range<usize>> {
        (0..self.threads).map(|w| Self::partition_range(len, self.threads, w)).filter(|r| !r.is_empty()).collect()
    }

    /// Splits `out` into `out.len() / unit` work items of `unit` elements and
    /// calls `f(item_range, chunk)` once per worker with that worker's items.
    /// Returns after every worker has finished.
    pub fn for_each_chunk_mut<T, F>(&self, out: &mut [T], unit: usize, f: F)
    where
        T: Send,
        F: Fn(Range<usize>, &mut [T]) + Sync,
    {
        assert!(unit > 0 && out.len() % unit == 0, "chunk unit must divide output");
        let items = out.len() / unit;
        let ranges = self.partition(items);
        match &self.inner {
            None => {
                for r in ranges {
                    let chunk = &mut out[r.start * unit..r.end * unit];
                    f(r, chunk);
                }
            }
            Some(pool) => {
                let f = &f;
                pool.scope(|s| {
                    let mut rest = out;
                    let mut consumed = 0;
                    for r in ranges {
                        let (_, tail) = rest.split_at_mut((r.start - consumed) * unit);
                        let (chunk, tail) = tail.split_at_mut(r.len() * unit);
                        consumed = r.end;
                        rest = tail;
                        s.spawn(move |_| f(r, chunk));
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_covers_every_index_once() {
        for threads in 1..=9 {
            for len in [0usize, 1, 3, 7, 64, 100] {
                let mut seen = vec![0u32; len];
                for w in 0..threads {
                    for i in WorkerPool::partition_range(len, threads, w) {
                        seen[i] += 1;
                    }
                }
                assert!(seen.iter().all(|&c| c == 1), "len={len} threads={threads}");
            }
        }
    }

    #[test]
    fn chunks_write_disjoint_regions() {
        let pool = WorkerPool::new(4).unwrap();
        let mut out = vec![0usize; 10 * 3];
        pool.for_each_chunk_mut(&mut out, 3, |items, chunk| {
            for (k, item) in items.enumerate() {
                chunk[k * 3..k * 3 + 3].fill(item + 1);
            }
        });
        for (i, v) in out.iter().enumerate() {
            assert_eq!(*v, i / 3 + 1);
        }
    }

    #[test]
    fn zero_threads_rejected() {
        assert!(WorkerPool::new(0).is_err());
    }
}
