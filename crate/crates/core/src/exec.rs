//! Execution helpers shared by the data-parallel loops.
//!
//! Every helper returns results in index order, so reductions performed by
//! the caller over the returned vector are deterministic regardless of how
//! the work was scheduled.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Evaluates `f(0..n)` and collects the results in index order.
pub fn map<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
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

/// Fallible variant of [`map`]; the error reported is the one with the
/// lowest index.
pub fn try_map<R, E, F>(n: usize, f: F) -> Result<Vec<R>, E>
where
    R: Send,
    E: Send,
    F: Fn(usize) -> Result<R, E> + Sync + Send,
{
    map(n, f).into_iter().collect()
}

/// Runs `f` on consecutive chunks of `data`, each `chunk` elements long.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Whether the crate was built with the rayon backend.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let v = map(100, |i| i * i);
        assert_eq!(v, (0..100).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn try_map_reports_first_error() {
        let r: Result<Vec<usize>, usize> = try_map(10, |i| if i % 3 == 2 { Err(i) } else { Ok(i) });
        assert_eq!(r, Err(2));
    }

    #[test]
    fn chunks_cover_everything() {
        let mut v = vec![0usize; 10];
        for_each_chunk_mut(&mut v, 3, |i, c| c.iter_mut().for_each(|x| *x = i));
        assert_eq!(v, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3]);
    }
}
