use rayon::prelude::*;

use crate::precision::{precision, with_precision};

/// Order-preserving parallel map that carries the caller's precision into the
/// worker threads. Results come back in input order, so any reduction over them
/// is independent of the worker count.
pub(crate) fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let p = precision();
    items
        .par_iter()
        .enumerate()
        .map(|(i, item)| with_precision(p, || f(i, item)))
        .collect()
}
