//! Execution policy for the data-parallel loops (batch inference, feature
//! generation, evidential scoring).
//!
//! `Parallelism::Rayon` uses the global rayon pool when the crate is built
//! with the `parallel` feature and silently degrades to the sequential path
//! otherwise. Both paths return results in input order, so every downstream
//! reduction is performed sequentially and stays bit-identical.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parallelism {
    Sequential,
    Rayon,
}

impl Default for Parallelism {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Parallelism::Rayon
        } else {
            Parallelism::Sequential
        }
    }
}

impl Parallelism {
    /// Maps `f` over `items`, preserving order.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Parallelism::Rayon => {
                use rayon::prelude::*;
                items.par_iter().map(f).collect()
            }
            _ => items.iter().map(f).collect(),
        }
    }

    /// Maps `f` over `0..n`, preserving order.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Parallelism::Rayon => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }

    /// Applies `f` to contiguous chunks of `items`; one result per chunk, in order.
    pub fn map_chunks<T, R, F>(self, items: &[T], chunk: usize, f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&[T]) -> R + Sync + Send,
    {
        let chunk = chunk.max(1);
        match self {
            #[cfg(feature = "parallel")]
            Parallelism::Rayon => {
                use rayon::prelude::*;
                items.par_chunks(chunk).map(f).collect()
            }
            _ => items.chunks(chunk).map(f).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_paths_preserve_order() {
        let xs: Vec<u64> = (0..1000).collect();
        let seq = Parallelism::Sequential.map(&xs, |x| x * x);
        let par = Parallelism::Rayon.map(&xs, |x| x * x);
        assert_eq!(seq, par);
        assert_eq!(
            Parallelism::Sequential.map_chunks(&xs, 7, |c| c.iter().sum::<u64>()),
            Parallelism::Rayon.map_chunks(&xs, 7, |c| c.iter().sum::<u64>())
        );
        assert_eq!(
            Parallelism::Rayon.map_range(5, |i| i + 1),
            vec![1, 2, 3, 4, 5]
        );
    }
}
