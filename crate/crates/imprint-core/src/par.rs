//! Switch point between the rayon backend and the sequential fallback.
//! Parallelism lives at outer loops only (batch items, corpus images,
//! templates), each task writing disjoint output, so both backends produce
//! bit-identical results and the feature flag never changes numerics.

/// Ordered independent map over `0..n`.
#[cfg(feature = "parallel")]
pub fn ordered_map<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

/// Ordered independent map over `0..n`.
#[cfg(not(feature = "parallel"))]
pub fn ordered_map<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    (0..n).map(f).collect()
}

/// Applies `f` to equally sized disjoint chunks of `data`, passing the chunk
/// index. The final chunk may be shorter.
#[cfg(feature = "parallel")]
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    use rayon::prelude::*;
    data.par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Applies `f` to equally sized disjoint chunks of `data`, passing the chunk
/// index. The final chunk may be shorter.
#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// True when the rayon backend is compiled in. Benchmarks use this to label
/// their measurements.
pub const fn backend_is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordered_map_preserves_order() {
        let v = ordered_map(100, |i| i * i);
        assert!(v.iter().enumerate().all(|(i, &x)| x == i * i));
    }

    #[test]
    fn chunked_writes_cover_everything() {
        let mut data = vec![0usize; 103];
        for_each_chunk_mut(&mut data, 10, |i, c| {
            for (j, v) in c.iter_mut().enumerate() {
                *v = i * 10 + j + 1;
            }
        });
        assert!(data.iter().enumerate().all(|(i, &x)| x == i + 1));
    }
}
