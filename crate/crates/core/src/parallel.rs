//! Order-preserving map over independent work items.
//!
//! Each item runs on its own gradient tape, so results are identical whether
//! the items run on the rayon pool or one after another; callers reduce the
//! returned vector in index order.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parallelism {
    Sequential,
    /// Rayon's global pool. Without the `parallel` feature this runs sequentially.
    #[default]
    Rayon,
}

impl Parallelism {
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync + Send,
    {
        match self {
            Parallelism::Sequential => items.iter().enumerate().map(|(i, x)| f(i, x)).collect(),
            Parallelism::Rayon => rayon_map(items, f),
        }
    }

    pub fn is_parallel(self) -> bool {
        self == Parallelism::Rayon && cfg!(feature = "parallel")
    }
}

#[cfg(feature = "parallel")]
fn rayon_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

#[cfg(not(feature = "parallel"))]
fn rayon_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_preserve_order() {
        let items: Vec<u64> = (0..1000).collect();
        let f = |i: usize, x: &u64| (i as u64) * 1_000_003 + x * x;
        let a = Parallelism::Sequential.map(&items, f);
        let b = Parallelism::Rayon.map(&items, f);
        assert_eq!(a, b);
        assert_eq!(a[7], 7 * 1_000_003 + 49);
    }
}
