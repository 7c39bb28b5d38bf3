//! Deterministic randomness: one master seed fans out to named streams.
//!
//! Every random decision in the simulator draws from a stream derived as
//! SHA-256(master seed, label), so changing one knob (say, the negative
//! sample count) never perturbs an unrelated stream, and any epoch can be
//! replayed in isolation from the master seed alone. ChaCha8 is used as the
//! stream cipher behind every generator; it is cryptographically seeded,
//! fast, and stable across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a 256-bit seed from the master seed and a stream label.
///
/// The label is domain-separated from the seed bytes so distinct labels can
/// never collide regardless of their content.
pub fn derive_seed(master_seed: u64, label: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update([0x1f]);
    hasher.update(label.as_bytes());
    hasher.finalize().into()
}

/// Opens the named deterministic stream.
pub fn stream(master_seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(master_seed, label))
}

/// Canonical stream labels used by the protocol.
///
/// Tests that reimplement parts of the protocol use these same builders so
/// both sides consume identical streams.
pub mod labels {
    /// Server-side item embedding initialization.
    pub const INIT_ITEM: &str = "init/item";

    /// Aggregation round key for the secure degree count.
    pub const DEGREES: &str = "secagg/degrees";

    /// Client-side embedding initialization for one user.
    pub fn init_user(user: usize) -> String {
        format!("init/user/{user}")
    }

    /// Aggregation round key for warm-up round `k`.
    pub fn warmup_round(k: usize) -> String {
        format!("secagg/warmup/{k}")
    }

    /// User sampling for one training epoch.
    pub fn sample(epoch: usize) -> String {
        format!("sample/{epoch}")
    }

    /// Negative sampling for one user's item query in one epoch.
    pub fn query(epoch: usize, user: usize) -> String {
        format!("query/{epoch}/{user}")
    }

    /// Batch construction during one user's local training in one epoch.
    pub fn batch(epoch: usize, user: usize) -> String {
        format!("batch/{epoch}/{user}")
    }

    /// Aggregation round key for one training epoch's uploads.
    pub fn train_round(epoch: usize) -> String {
        format!("secagg/train/{epoch}")
    }
}
