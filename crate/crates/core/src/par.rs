//! Order-preserving data-parallel helpers.
//!
//! Every helper returns results in input order, so selections made on the
//! collected output are independent of thread scheduling. Without the
//! `parallel` feature the same functions run sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, keeping input order.
#[cfg(feature = "parallel")]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Maps `f` over `0..n`, keeping index order.
#[cfg(feature = "parallel")]
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).map(f).collect()
}

/// True when compiled with the rayon backend.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_keeps_order() {
        let xs: Vec<u64> = (0..1000).collect();
        let ys = map(&xs, |x| x * x);
        assert_eq!(ys, xs.iter().map(|x| x * x).collect::<Vec<_>>());
        assert_eq!(map_range(5, |i| i + 1), vec![1, 2, 3, 4, 5]);
    }
}
