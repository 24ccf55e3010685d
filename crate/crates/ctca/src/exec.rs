//! Batch executor that spreads per-utterance jobs over scoped threads.

use ctca_core::training::{Executor, UtteranceGrad};
use ctca_core::Result;

/// Runs jobs on up to `threads` workers; results come back in index order.
#[derive(Debug, Clone, Copy)]
pub struct Threaded {
    pub threads: usize,
}

impl Threaded {
    pub fn new(threads: usize) -> Self {
        Self { threads: threads.max(1) }
    }
}

impl Executor for Threaded {
    fn map(&self, n: usize, job: &(dyn Fn(usize) -> Result<UtteranceGrad> + Sync)) -> Vec<Result<UtteranceGrad>> {
        let workers = self.threads.min(n);
        if workers <= 1 {
            return (0..n).map(job).collect();
        }
        let chunk = n.div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let range = w * chunk..((w + 1) * chunk).min(n);
                    s.spawn(move || range.map(job).collect::<Vec<_>>())
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
        })
    }
}
