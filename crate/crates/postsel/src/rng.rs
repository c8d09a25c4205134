//! Deterministic stream derivation for reproducible experiments.
//!
//! Each (seed, replicate, phase) triple maps to an independent ChaCha stream
//! through the cipher key, so replicates can run in parallel and any phase can
//! be replayed in isolation without consuming draws from another phase.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Phases of a simulation replicate that draw randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Design,
    Coefs,
    Noise,
    CrossVal,
    Sampler,
    Bootstrap,
}

impl Phase {
    fn label(self) -> u64 {
        u64::from_le_bytes(match self {
            Phase::Design => *b"design__",
            Phase::Coefs => *b"coefs___",
            Phase::Noise => *b"noise___",
            Phase::CrossVal => *b"crossval",
            Phase::Sampler => *b"sampler_",
            Phase::Bootstrap => *b"bootstrp",
        })
    }
}

/// RNG for one phase of one replicate, derived from the experiment seed.
pub fn stream_rng(seed: u64, rep_id: u64, phase: Phase) -> StreamRng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&rep_id.to_le_bytes());
    key[16..24].copy_from_slice(&phase.label().to_le_bytes());
    key[24..32].copy_from_slice(b"postsel1");
    ChaCha8Rng::from_seed(key)
}

/// RNG for a standalone run (CLI commands, single fits).
pub fn seed_rng(seed: u64) -> StreamRng {
    stream_rng(seed, 0, Phase::Sampler)
}
