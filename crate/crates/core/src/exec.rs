//! Data-parallel execution with a sequential fallback.
//!
//! With the `parallel` feature (default) work is spread over a rayon pool. Without
//! it, or with [`Execution::Sequential`], the same closures run in order on the
//! calling thread. Results are always returned in input order, so outputs never
//! depend on scheduling.

/// How batch work is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// Global rayon pool.
    #[default]
    Parallel,
    /// Dedicated pool with at most this many threads.
    Bounded(usize),
}

impl Execution {
    /// Build from a `--parallelism` style bound, where 1 means sequential.
    pub fn with_parallelism(n: usize) -> Self {
        match n {
            0 => Execution::Parallel,
            1 => Execution::Sequential,
            n => Execution::Bounded(n),
        }
    }

    pub fn is_parallel(&self) -> bool {
        cfg!(feature = "parallel") && !matches!(self, Execution::Sequential)
    }

    /// Map `f` over `items`, preserving order.
    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            match *self {
                Execution::Sequential => {}
                Execution::Parallel => return items.par_iter().map(f).collect(),
                Execution::Bounded(n) => {
                    if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(n).build() {
                        return pool.install(|| items.par_iter().map(f).collect());
                    }
                    log::warn!("could not build a {n}-thread pool, running sequentially");
                }
            }
        }
        items.iter().map(f).collect()
    }

    /// Map `f` over `0..n`, preserving order.
    pub fn map_range<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            match *self {
                Execution::Sequential => {}
                Execution::Parallel => return (0..n).into_par_iter().map(f).collect(),
                Execution::Bounded(t) => {
                    if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(t).build() {
                        return pool.install(|| (0..n).into_par_iter().map(f).collect());
                    }
                    log::warn!("could not build a {t}-thread pool, running sequentially");
                }
            }
        }
        (0..n).map(f).collect()
    }
}
