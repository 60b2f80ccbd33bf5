//! Data-parallel helpers.
//!
//! With the `parallel` feature the helpers fan out over rayon's pool; without
//! it (or after `set_enabled(false)`) they run the same closures in order.
//! Work is only ever split over independent outputs, never over a reduction,
//! so results are bitwise identical either way.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Minimum number of scalar elements per task before splitting pays off.
pub const MIN_PAR_WORK: usize = 1 << 14;

/// Toggle parallel execution at runtime. Has no effect without the feature.
pub fn set_enabled(on: bool) {
    ENABLED.store(on && cfg!(feature = "parallel"), Ordering::Relaxed);
}

pub fn enabled() -> bool {
    ENABLED.load(Ordering::Relaxed)
}

/// Run `f(index, chunk)` over consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, work_per_chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    {
        let n_chunks = data.len().div_ceil(chunk);
        if enabled() && n_chunks > 1 && n_chunks * work_per_chunk >= MIN_PAR_WORK {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    let _ = work_per_chunk;
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Map `f` over `0..n`, preserving order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if enabled() && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_everything_in_order() {
        let mut v = vec![0usize; 100_000];
        for_each_chunk_mut(&mut v, 333, 1 << 20, |i, c| {
            for (j, x) in c.iter_mut().enumerate() {
                *x = i * 333 + j;
            }
        });
        assert!(v.iter().enumerate().all(|(i, &x)| i == x));
    }

    #[test]
    fn map_range_keeps_order() {
        let v = map_range(50, |i| i * i);
        assert_eq!(v[7], 49);
        assert_eq!(v.len(), 50);
    }
}
