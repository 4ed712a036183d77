//! Row-parallel execution helpers.
//!
//! Per-pixel work in this crate (fisheye rendering, stitching, viewport
//! reprojection) is expressed as "fill each output row independently". With
//! the `parallel` feature the rows are spread over the rayon pool; without it
//! (or with [`Exec::Sequential`]) they run in order on the calling thread.
//! Both paths write identical bytes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution strategy for data-parallel loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            Exec::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            Exec::Sequential
        }
    }
}

/// Calls `f(row_index, row)` for every `row_len`-sized chunk of `data`.
pub fn for_each_row<T, F>(exec: Exec, data: &mut [T], row_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if row_len == 0 {
        return;
    }
    match exec {
        Exec::Sequential => data
            .chunks_mut(row_len)
            .enumerate()
            .for_each(|(y, row)| f(y, row)),
        #[cfg(feature = "parallel")]
        Exec::Parallel => data
            .par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(y, row)| f(y, row)),
    }
}

/// Maps `f` over `0..n`, collecting results in index order.
pub fn map_indices<R, F>(exec: Exec, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    match exec {
        Exec::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_and_default_agree() {
        let fill = |exec| {
            let mut v = vec![0u32; 12 * 7];
            for_each_row(exec, &mut v, 12, |y, row| {
                for (x, p) in row.iter_mut().enumerate() {
                    *p = (y * 100 + x) as u32;
                }
            });
            v
        };
        assert_eq!(fill(Exec::Sequential), fill(Exec::default()));
        assert_eq!(
            map_indices(Exec::default(), 5, |i| i * i),
            vec![0, 1, 4, 9, 16]
        );
    }
}
