//! Order-preserving data-parallel map.
//!
//! With the `parallel` feature the work runs on rayon, capped by the
//! `GRFU_THREADS` environment variable when set. Without the feature, or with
//! [`Parallelism::Sequential`], the same closures run in a plain loop. Results
//! always come back in input order, so callers that reduce them sequentially
//! get bit-identical answers either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Parallelism {
    #[default]
    Auto,
    Sequential,
}

/// Name of the environment variable capping worker threads.
pub const THREADS_ENV: &str = "GRFU_THREADS";

#[cfg(feature = "parallel")]
fn pool() -> Option<&'static rayon::ThreadPool> {
    use std::sync::OnceLock;
    static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads: usize = std::env::var(THREADS_ENV).ok()?.trim().parse().ok()?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .ok()
    })
    .as_ref()
}

pub fn map<T, R, F>(items: &[T], mode: Parallelism, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if mode == Parallelism::Auto {
            let run = || items.par_iter().map(&f).collect();
            return match pool() {
                Some(p) => p.install(run),
                None => run(),
            };
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = mode;
    items.iter().map(f).collect()
}

pub fn map_range<R, F>(n: usize, mode: Parallelism, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    let idx: Vec<usize> = (0..n).collect();
    map(&idx, mode, |&i| f(i))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let xs: Vec<u64> = (0..1000).collect();
        let a = map(&xs, Parallelism::Auto, |x| x * x);
        let b = map(&xs, Parallelism::Sequential, |x| x * x);
        assert_eq!(a, b);
        assert_eq!(map_range(3, Parallelism::Auto, |i| i + 1), vec![1, 2, 3]);
    }
}
