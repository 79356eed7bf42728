//! Reproducible parallel ensembles.
//!
//! Every trajectory owns a child random stream derived from
//! `(master_seed, trajectory_index)` alone, so results do not depend on the
//! number of workers or on scheduling order:
//!
//! 1. the 256-bit ChaCha key is four consecutive SplitMix64 outputs seeded
//!    with `master_seed`, each written little-endian;
//! 2. the ChaCha20 stream id is the trajectory index; the word position starts
//!    at zero.
//!
//! Results are gathered in trajectory-index order before any reduction.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Identifies the random stream a trajectory was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Lineage {
    pub master_seed: u64,
    pub index: u64,
}

impl Lineage {
    pub fn new(master_seed: u64, index: u64) -> Self {
        Self { master_seed, index }
    }

    pub fn rng(&self) -> ChaCha20Rng {
        child_rng(self.master_seed, self.index)
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// ChaCha20 key for a master seed: four SplitMix64 outputs, little-endian.
pub fn master_key(master_seed: u64) -> [u8; 32] {
    let mut state = master_seed;
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    key
}

pub fn child_rng(master_seed: u64, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::from_seed(master_key(master_seed));
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub trajectories: usize,
    pub master_seed: u64,
    pub workers: usize,
}

impl EnsembleConfig {
    pub fn new(trajectories: usize, master_seed: u64, workers: usize) -> Self {
        Self { trajectories, master_seed, workers }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trajectories == 0 {
            return Err(invalid("ensemble needs at least one trajectory"));
        }
        if self.workers == 0 {
            return Err(invalid("worker count must be at least 1"));
        }
        Ok(())
    }
}

/// Runs `task` for every trajectory index on a pool of `cfg.workers` threads
/// and returns the results in index order.
pub fn run_indexed<T, F>(cfg: &EnsembleConfig, task: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(Lineage) -> Result<T> + Sync + Send,
{
    cfg.validate()?;
    let seed = cfg.master_seed;
    let n = cfg.trajectories as u64;
    if cfg.workers == 1 {
        return (0..n).map(|k| task(Lineage::new(seed, k))).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| invalid(format!("thread pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(|k| task(Lineage::new(seed, k))).collect::<Result<Vec<T>>>())
}
