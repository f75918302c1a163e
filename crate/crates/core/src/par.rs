//! Data-parallel helpers.
//!
//! Every kernel goes through these helpers so the same code runs either on
//! the rayon pool (feature `parallel`) or sequentially. Work items are
//! disjoint output chunks, and reductions are always combined in index order,
//! so both modes produce bitwise identical results.
//!
//! The mode can also be switched at runtime: `MIMICDET_DETERMINISTIC=1`
//! forces the sequential path, and `MIMICDET_THREADS` caps the pool size.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Parallel,
    Sequential,
}

const UNSET: u8 = 0;
const PAR: u8 = 1;
const SEQ: u8 = 2;

static MODE: AtomicU8 = AtomicU8::new(UNSET);

/// Current execution mode. The first call consults the environment.
pub fn mode() -> Mode {
    match MODE.load(Ordering::Relaxed) {
        PAR => Mode::Parallel,
        SEQ => Mode::Sequential,
        _ => {
            let m = mode_from_env();
            set_mode(m);
            m
        }
    }
}

pub fn set_mode(mode: Mode) {
    let m = if cfg!(feature = "parallel") && mode == Mode::Parallel {
        PAR
    } else {
        SEQ
    };
    MODE.store(m, Ordering::Relaxed);
}

fn mode_from_env() -> Mode {
    let deterministic = std::env::var("MIMICDET_DETERMINISTIC")
        .map(|v| v == "1" || v.eq_ignore_ascii_case("true"))
        .unwrap_or(false);
    if deterministic || !cfg!(feature = "parallel") {
        Mode::Sequential
    } else {
        Mode::Parallel
    }
}

/// Sizes the global rayon pool from `MIMICDET_THREADS`. Safe to call more
/// than once; only the first successful call has an effect.
pub fn init_thread_pool() {
    #[cfg(feature = "parallel")]
    {
        if let Some(n) = std::env::var("MIMICDET_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0)
        {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

pub fn num_threads() -> usize {
    match mode() {
        #[cfg(feature = "parallel")]
        Mode::Parallel => rayon::current_num_threads(),
        _ => 1,
    }
}

/// Runs `f(index, chunk)` over consecutive `chunk_len`-sized chunks of `data`.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk_len == 0 || data.is_empty() {
        return;
    }
    match mode() {
        #[cfg(feature = "parallel")]
        Mode::Parallel => {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
        }
        _ => data
            .chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c)),
    }
}

/// Like [`for_each_chunk`] over two buffers chunked in lockstep.
pub fn for_each_chunk2<A, B, F>(a: &mut [A], a_len: usize, b: &mut [B], b_len: usize, f: F)
where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Sync + Send,
{
    if a_len == 0 || b_len == 0 || a.is_empty() {
        return;
    }
    debug_assert_eq!(a.len() / a_len, b.len() / b_len);
    match mode() {
        #[cfg(feature = "parallel")]
        Mode::Parallel => {
            use rayon::prelude::*;
            a.par_chunks_mut(a_len)
                .zip(b.par_chunks_mut(b_len))
                .enumerate()
                .for_each(|(i, (x, y))| f(i, x, y));
        }
        _ => a
            .chunks_mut(a_len)
            .zip(b.chunks_mut(b_len))
            .enumerate()
            .for_each(|(i, (x, y))| f(i, x, y)),
    }
}

/// Ordered parallel map. Results come back in index order.
pub fn map<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match mode() {
        #[cfg(feature = "parallel")]
        Mode::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}
