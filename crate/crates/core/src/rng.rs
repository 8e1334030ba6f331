//! Deterministic random streams.
//!
//! Every path draws from its own ChaCha stream keyed by `(master seed,
//! domain)` with the path index as the stream id, so results never depend
//! on how paths are scheduled across workers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Which consumer a stream belongs to. Noise and volatility use distinct
/// domains so the two are independent unless explicitly shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Noise,
    Volatility,
    /// Auxiliary draws made by tests and tools (random instances, etc.).
    Auxiliary(u64),
}

impl Domain {
    fn tag(self) -> u64 {
        match self {
            Domain::Noise => 0x6e6f_6973_6500_0001,
            Domain::Volatility => 0x766f_6c00_0000_0002,
            Domain::Auxiliary(k) => 0x6175_7800_0000_0000 ^ k.rotate_left(17),
        }
    }
}

/// How volatility randomness relates to the driving noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SeedMode {
    /// σ and L are driven by independent streams.
    #[default]
    Independent,
    /// σ reuses the noise stream; σ and L are then dependent.
    Shared,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for one path of one domain.
pub fn path_rng(seed: u64, domain: Domain, path: usize) -> ChaCha8Rng {
    let mut state = seed ^ domain.tag();
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(path as u64);
    rng
}
