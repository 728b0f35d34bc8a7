//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) these fan out over rayon; without
//! it they run sequentially. Work is always partitioned along independent
//! units (rows, clients, samples) and each unit reduces sequentially, so
//! both paths produce bit-identical results.

/// Below this many scalar ops, parallel dispatch costs more than it saves.
pub const MIN_PAR_WORK: usize = 1 << 16;

/// Apply `f(i, row)` to each `row_len`-sized chunk of `out`.
/// `total_work` is an estimate of scalar ops used to gate parallelism.
pub fn for_each_row<T, F>(out: &mut [T], row_len: usize, total_work: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if total_work >= MIN_PAR_WORK && out.len() > row_len {
            out.par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    let _ = total_work;
    for (i, row) in out.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}

/// Order-preserving indexed map; parallel when the unit of work is coarse.
pub fn map_indexed<R, F>(n: usize, coarse: bool, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if coarse && n > 1 {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = coarse;
    (0..n).map(f).collect()
}

/// True when this build dispatches onto rayon.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
