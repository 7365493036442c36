//! Order-preserving data-parallel map. Runs on the rayon pool when the
//! `parallel` feature is enabled and sequentially otherwise; results are
//! identical either way.

use std::sync::atomic::{AtomicUsize, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static SEQUENTIAL_SCOPES: AtomicUsize = AtomicUsize::new(0);

/// Whether work is spread over the rayon pool right now.
pub fn enabled() -> bool {
    cfg!(feature = "parallel") && SEQUENTIAL_SCOPES.load(Ordering::Relaxed) == 0
}

/// Runs `f` with every map in the process forced onto the calling thread.
pub fn sequential<R>(f: impl FnOnce() -> R) -> R {
    struct Guard;
    impl Drop for Guard {
        fn drop(&mut self) {
            SEQUENTIAL_SCOPES.fetch_sub(1, Ordering::Relaxed);
        }
    }
    SEQUENTIAL_SCOPES.fetch_add(1, Ordering::Relaxed);
    let _guard = Guard;
    f()
}

/// `f` applied to every item, results in input order.
pub fn map<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if enabled() {
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

/// `f(i)` for `i in 0..n`, results in index order.
pub fn map_range<O, F>(n: usize, f: F) -> Vec<O>
where
    O: Send,
    F: Fn(usize) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if enabled() {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let v: Vec<u64> = (0..1000).collect();
        assert_eq!(map(&v, |x| x * 3), v.iter().map(|x| x * 3).collect::<Vec<_>>());
        assert_eq!(map_range(5, |i| i * i), vec![0, 1, 4, 9, 16]);
        let seq = sequential(|| {
            assert!(!enabled());
            map(&v, |x| x * 3)
        });
        assert_eq!(seq, map(&v, |x| x * 3));
    }
}
