//! Execution mode for the data-parallel kernels.
//!
//! With the `parallel` feature (default) the convolution kernels, the
//! renderer and the per-sample dataset/evaluation loops fan out over rayon.
//! Every parallel loop writes disjoint output chunks whose contents are
//! computed in a fixed order, so results are bit-identical to the sequential
//! path. The mode can be flipped at runtime for benchmarking.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    Parallel,
}

/// Select the execution mode. `Parallel` is ignored when the crate is built
/// without the `parallel` feature.
pub fn set_mode(mode: Mode) {
    PARALLEL.store(mode == Mode::Parallel && cfg!(feature = "parallel"), Ordering::Relaxed);
}

pub fn mode() -> Mode {
    if PARALLEL.load(Ordering::Relaxed) {
        Mode::Parallel
    } else {
        Mode::Sequential
    }
}

/// Run `f(index, chunk)` over consecutive `chunk_len`-sized chunks of `data`.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if mode() == Mode::Parallel {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Map `f` over `0..n`, preserving index order in the result.
pub fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode() == Mode::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
