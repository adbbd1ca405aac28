//! Data-parallel map with a sequential fallback.
//!
//! Per-scene work (rendering, scoring, purification) is embarrassingly
//! parallel, so the whole crate funnels through `map_indexed`. With the
//! `parallel` feature (default) it fans out over rayon; without it, the same
//! call is a plain loop. Results are always collected in index order and all
//! reductions downstream happen sequentially over that order, so outputs are
//! identical either way — the bench suite and a unit test both hold this.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f` to every index in `0..n`, returning results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Sequential twin of `map_indexed`, compiled under every feature set.
/// Exists so benches and determinism tests can compare the two directly.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        // Nontrivial float work: accumulation order inside one index is fixed,
        // so results must match bit for bit across both paths.
        let work = |i: usize| {
            let mut acc = 0.0_f64;
            for k in 1..200 {
                acc += ((i * k) as f64).sin() / k as f64;
            }
            acc
        };
        let par = map_indexed(64, work);
        let seq = map_indexed_seq(64, work);
        assert_eq!(par.len(), 64);
        for (a, b) in par.iter().zip(seq.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn preserves_index_order() {
        let v = map_indexed(1000, |i| i);
        assert_eq!(v, (0..1000).collect::<Vec<_>>());
    }
}
