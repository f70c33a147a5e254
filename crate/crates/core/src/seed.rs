//! Seed derivation.
//!
//! Every random stream is keyed by the root seed and a stage name:
//! `stage_seed = xxh64(stage.as_bytes(), seed = root)`, and the stream itself
//! is `ChaCha8Rng::seed_from_u64(stage_seed)`. Per-item streams (one per
//! document, one per embedding row) append the item key in decimal, e.g.
//! `"perturb/17"`. Any stage can therefore be re-run in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use twox_hash::XxHash64;

pub type Rng = ChaCha8Rng;

pub fn derive(root: u64, stage: &str) -> u64 {
    XxHash64::oneshot(root, stage.as_bytes())
}

pub fn stage_rng(root: u64, stage: &str) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(root, stage))
}

pub fn item_rng(root: u64, stage: &str, item: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(root, &format!("{stage}/{item}")))
}
