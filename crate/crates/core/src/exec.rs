//! Execution mode for independent work items and fixed-topology reductions.
//!
//! Independent items (seeds, grid points, probes, sharpness batches) may run
//! on the rayon pool. Sums inside a single gradient never do: they go through
//! [`tree_reduce_rows`], whose pairing is a function of the row count only, so
//! results are bit-stable across thread counts and execution modes.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    Sequential,
    /// Uses the global rayon pool. Falls back to sequential when the crate is
    /// built without the `parallel` feature.
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

impl Execution {
    /// Evaluates `f(0..n)` and returns the results in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }

    /// Like [`Execution::map`] but stops at the first error (by index order).
    pub fn try_map<T, E, F>(self, n: usize, f: F) -> Result<Vec<T>, E>
    where
        T: Send,
        E: Send,
        F: Fn(usize) -> Result<T, E> + Sync + Send,
    {
        self.map(n, f).into_iter().collect()
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Sums `count` rows of a row-major buffer into row 0.
///
/// Rows are combined pairwise at strides 1, 2, 4, ...; the topology depends
/// only on `count`.
pub fn tree_reduce_rows(buf: &mut [f64], count: usize, width: usize) {
    debug_assert!(buf.len() >= count * width);
    let mut stride = 1;
    while stride < count {
        let mut i = 0;
        while i + stride < count {
            let (head, tail) = buf.split_at_mut((i + stride) * width);
            let dst = &mut head[i * width..(i + 1) * width];
            let src = &tail[..width];
            for (a, b) in dst.iter_mut().zip(src) {
                *a += *b;
            }
            i += 2 * stride;
        }
        stride *= 2;
    }
}

/// Pairwise sum with the same topology as [`tree_reduce_rows`] at width 1.
/// Overwrites `values`.
pub fn tree_sum(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len();
    tree_reduce_rows(values, n, 1);
    values[0]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_sum_small_cases() {
        assert_eq!(tree_sum(&mut []), 0.0);
        assert_eq!(tree_sum(&mut [3.0]), 3.0);
        assert_eq!(tree_sum(&mut [1.0, 2.0, 3.0]), 6.0);
        assert_eq!(tree_sum(&mut [1.0; 13]), 13.0);
    }

    #[test]
    fn tree_sum_topology_is_pairwise() {
        // ((a+b)+(c+d)) differs from the left fold for these values.
        let vals = [1e16, 1.0, -1e16, 1.0];
        let mut v = vals;
        assert_eq!(tree_sum(&mut v), ((1e16 + 1.0) + (-1e16 + 1.0)));
    }

    #[test]
    fn rows_reduce_like_scalars() {
        let mut buf: Vec<f64> = (0..15).map(|k| k as f64 * 0.1).collect();
        let mut col0: Vec<f64> = buf.iter().step_by(3).copied().collect();
        tree_reduce_rows(&mut buf, 5, 3);
        assert_eq!(buf[0], tree_sum(&mut col0));
    }

    #[test]
    fn map_preserves_order_in_both_modes() {
        for mode in [Execution::Sequential, Execution::Parallel] {
            let v = mode.map(100, |i| i * i);
            assert!(v.iter().enumerate().all(|(i, &x)| x == i * i));
        }
    }
}
