// Thread-count and reduction-order policy shared by the trainers.

use rayon::prelude::*;
use std::sync::Mutex;

use crate::error::{FluxError, Result};

pub const THREADS_ENV: &str = "FLUXLOOP_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Exec {
    pub threads: usize,
    /// Fold per-chunk results in submission order instead of completion order.
    pub deterministic: bool,
}

impl Default for Exec {
    fn default() -> Self {
        Self { threads: 1, deterministic: true }
    }
}

impl Exec {
    pub fn new(threads: usize, deterministic: bool) -> Self {
        Self { threads: threads.max(1), deterministic }
    }

    /// Thread count from the flag, then `FLUXLOOP_THREADS`, then the number
    /// of available cores.
    pub fn resolve_threads(flag: Option<usize>) -> Result<usize> {
        if let Some(n) = flag {
            return Ok(n.max(1));
        }
        match std::env::var(THREADS_ENV) {
            Ok(v) => v
                .trim()
                .parse::<usize>()
                .map(|n| n.max(1))
                .map_err(|_| FluxError::Config(format!("{THREADS_ENV}={v:?} is not a thread count"))),
            Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
        }
    }

    pub fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build()
            .map_err(|e| FluxError::Config(format!("cannot start worker pool: {e}")))
    }

    /// Maps `f` over `items` on `pool` and folds the results with `fold`.
    /// In deterministic mode the fold runs in item order; otherwise results
    /// are folded as workers finish.
    pub fn map_fold<T, R, F, G>(&self, pool: &rayon::ThreadPool, items: &[T], f: F, mut fold: G) -> Result<()>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> Result<R> + Sync,
        G: FnMut(R) + Send,
    {
        if self.threads == 1 || items.len() == 1 {
            for item in items {
                fold(f(item)?);
            }
            return Ok(());
        }
        if self.deterministic {
            let results: Vec<Result<R>> = pool.install(|| items.par_iter().map(&f).collect());
            for r in results {
                fold(r?);
            }
            Ok(())
        } else {
            let sink = Mutex::new((fold, None::<FluxError>));
            pool.install(|| {
                items.par_iter().for_each(|item| {
                    let r = f(item);
                    let mut guard = sink.lock().expect("fold poisoned");
                    match r {
                        Ok(v) => (guard.0)(v),
                        Err(e) => {
                            guard.1.get_or_insert(e);
                        }
                    }
                })
            });
            match sink.into_inner().expect("fold poisoned").1 {
                Some(e) => Err(e),
                None => Ok(()),
            }
        }
    }
}
