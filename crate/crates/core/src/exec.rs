//! Execution helpers shared by the data-parallel stages.
//!
//! Every parallel loop in the crate goes through these wrappers so the
//! `parallel` feature can swap rayon in and out without touching call sites.
//! Floating-point reductions always run over an ordered buffer with a
//! length-determined pairwise order, which keeps results bit-identical
//! across thread counts and across the two execution modes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, preserving index order in the returned vector.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
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

/// Apply `f` to each fixed-length row of `data`. Rows are disjoint, so both
/// execution modes produce identical buffers.
pub fn for_each_row<F>(data: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert_eq!(data.len() % row_len.max(1), 0);
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
    }
}

/// Pairwise (tree) summation over an ordered slice. The reduction order is a
/// function of the slice length alone, so sums are reproducible regardless of
/// how the slice was filled, and intermediate rounding error stays small.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 8 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Derive an independent RNG stream from a master seed and a stream index.
/// Streams are stable across platforms and parallel schedules, which makes
/// randomized stages reproducible under any thread count.
pub fn derive_rng(master_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&master_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&stream.to_le_bytes());
    let mixed = splitmix64(master_seed ^ splitmix64(stream));
    seed[16..24].copy_from_slice(&mixed.to_le_bytes());
    seed[24..32].copy_from_slice(&splitmix64(mixed).to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
