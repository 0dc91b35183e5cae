//! Data-parallel helpers.
//!
//! With the `parallel` feature the helpers fan out over rayon's pool; without
//! it they run sequentially. Results are always collected in index order and
//! any reduction over them happens afterwards in that order, so both modes
//! produce bit-identical output.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How batch-level loops are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
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

/// `(0..len).map(f).collect()` with optional parallel fan-out.
pub fn map_indexed<T, F>(exec: Execution, len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel if len > 1 => (0..len).into_par_iter().map(f).collect(),
        _ => (0..len).map(f).collect(),
    }
}

/// Apply `f` to consecutive `chunk`-sized pieces of `out`.
pub fn for_each_chunk_mut<T, F>(exec: Execution, out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if chunk == 0 {
        return;
    }
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel if out.len() > chunk => out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c)),
        _ => out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c)),
    }
}

/// Sum equally sized vectors in index order.
pub fn sum_ordered(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    for p in parts {
        debug_assert_eq!(p.len(), len);
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let f = |i: usize| (i as f64).sqrt() * 1.1;
        let a = map_indexed(Execution::Sequential, 1000, f);
        let b = map_indexed(Execution::Parallel, 1000, f);
        assert_eq!(a, b);

        let mut x = vec![0usize; 103];
        let mut y = vec![0usize; 103];
        for_each_chunk_mut(Execution::Sequential, &mut x, 10, |i, c| c.iter_mut().for_each(|v| *v = i));
        for_each_chunk_mut(Execution::Parallel, &mut y, 10, |i, c| c.iter_mut().for_each(|v| *v = i));
        assert_eq!(x, y);
        assert_eq!(x[102], 10);
    }
}
