//! Deterministic replicate execution.
//!
//! Every replicate owns an independent RNG stream derived from
//! `(master_seed, context, replicate)`, so results do not depend on thread
//! count or scheduling. With the `parallel` feature (default) replicates run
//! on a rayon pool; without it, or with [`Parallelism::Sequential`], they run
//! in a plain loop over the same code path.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// How replicate batches are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parallelism {
    /// One replicate at a time, in index order.
    Sequential,
    /// All available threads.
    Max,
    /// A fixed number of worker threads.
    Threads(usize),
}

impl Parallelism {
    /// Interpret a CLI-style thread count: 0 = all threads, 1 = sequential.
    pub fn from_thread_count(threads: usize) -> Parallelism {
        match threads {
            0 => Parallelism::Max,
            1 => Parallelism::Sequential,
            n => Parallelism::Threads(n),
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mixes a master seed with a context tag (subcommand, grid point, ...).
pub fn derive_seed(master_seed: u64, context: u64) -> u64 {
    splitmix64(master_seed ^ splitmix64(context))
}

/// Counter-based RNG stream for one replicate.
///
/// The key depends on `(master_seed, context)` and the stream index on the
/// replicate, so any replicate can be reproduced in isolation.
pub fn replicate_rng(master_seed: u64, context: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master_seed, context));
    rng.set_stream(replicate);
    rng
}

/// Runs `count` replicates and collects their outputs in replicate order.
pub fn map_replicates<T, F>(count: usize, parallelism: Parallelism, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match parallelism {
        Parallelism::Sequential | Parallelism::Threads(1) => (0..count).map(f).collect(),
        #[cfg(feature = "parallel")]
        Parallelism::Max => {
            use rayon::prelude::*;
            (0..count).into_par_iter().map(f).collect()
        }
        #[cfg(feature = "parallel")]
        Parallelism::Threads(n) => {
            use rayon::prelude::*;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .expect("failed to build worker pool");
            pool.install(|| (0..count).into_par_iter().map(f).collect())
        }
        #[cfg(not(feature = "parallel"))]
        _ => (0..count).map(f).collect(),
    }
}
