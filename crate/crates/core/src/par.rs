//! Data-parallel helpers. With the `parallel` feature disabled every helper
//! degrades to the sequential loop, and results are identical either way:
//! items are processed independently and collected in input order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Runtime choice of execution strategy, used by callers that want to compare
/// the two (benchmarks) or force sequential execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    Sequential,
    #[default]
    Parallel,
}

impl ExecMode {
    /// Whether parallel execution is actually available in this build.
    pub fn effective(self) -> ExecMode {
        if cfg!(feature = "parallel") {
            self
        } else {
            ExecMode::Sequential
        }
    }
}

pub fn map<I, O, F>(mode: ExecMode, items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    match mode.effective() {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => items.par_iter().map(f).collect(),
        _ => items.iter().map(f).collect(),
    }
}

pub fn map_indexed<O, F>(mode: ExecMode, n: usize, f: F) -> Vec<O>
where
    O: Send,
    F: Fn(usize) -> O + Sync + Send,
{
    match mode.effective() {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => (0..n).into_par_iter().map(f).collect(),
        _ => (0..n).map(f).collect(),
    }
}

/// Applies `f` to consecutive `chunk`-sized pieces of `out`, in parallel when
/// the work is large enough to amortize the scheduling cost.
pub(crate) fn for_each_row_mut<T, F>(out: &mut [T], chunk: usize, work: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    const PAR_THRESHOLD: usize = 1 << 17;
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = work;
    out.chunks_mut(chunk).enumerate().for_each(|(i, row)| f(i, row));
}
