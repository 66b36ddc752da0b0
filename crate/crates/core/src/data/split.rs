use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.2;

/// Seeded train/test partition of pixel indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Shuffle `0..n` with `seed` and take the first `round(fraction * n)` as
/// training pixels. Both index lists come back sorted.
pub fn split_pixels(n: usize, train_fraction: f64, seed: u64) -> SplitSpec {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((train_fraction * n as f64).round() as usize).min(n);
    let mut train_indices = idx[..n_train].to_vec();
    let mut test_indices = idx[n_train..].to_vec();
    train_indices.sort_unstable();
    test_indices.sort_unstable();
    SplitSpec {
        train_fraction,
        seed,
        train_indices,
        test_indices,
    }
}
