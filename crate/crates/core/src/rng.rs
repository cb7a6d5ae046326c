//! Replayable sample streams.
//!
//! Every random draw made by a solver comes from a ChaCha8 stream cipher used
//! as a counter-based generator: the 256-bit key is derived from
//! `(master_seed, replication, tag)` by SplitMix64 mixing, and the 64-bit
//! block counter advances with each draw. Two runs with the same triple see
//! the same sequence regardless of thread scheduling.
//!
//! Key derivation (for ports to other languages):
//!
//! ```text
//! h0 = splitmix64(master_seed ^ 0x5249_4553_434f_4d50)
//! h1 = splitmix64(h0 ^ replication)
//! h2 = splitmix64(h1 ^ tag.id())
//! key words i = 0..4: splitmix64(h2 + i * 0x9e37_79b9_7f4a_7c15), little endian
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator type handed to problem oracles when they draw samples.
pub type SampleRng = ChaCha8Rng;

/// Named sample streams.
///
/// `Phi` feeds the innermost map (two-level `g_φ`, multi-level level 1) and
/// `Xi` feeds the outermost function (two-level `f_ξ`, multi-level level N).
/// Intermediate multi-level functions use `Theta(n)` with `2 <= n < N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamTag {
    Init,
    Phi,
    Xi,
    Theta(usize),
    Metrics,
}

impl StreamTag {
    pub fn id(self) -> u64 {
        match self {
            StreamTag::Init => 0,
            StreamTag::Phi => 1,
            StreamTag::Xi => 2,
            StreamTag::Metrics => 3,
            StreamTag::Theta(n) => 0x100 + n as u64,
        }
    }
}

/// Identifies one replication of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamSeed {
    pub master: u64,
    pub replication: u64,
}

impl StreamSeed {
    pub fn new(master: u64, replication: u64) -> Self {
        Self { master, replication }
    }

    pub fn rng(&self, tag: StreamTag) -> SampleRng {
        stream_rng(self.master, self.replication, tag)
    }
}

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream_key(master: u64, replication: u64, tag: StreamTag) -> [u8; 32] {
    let h0 = splitmix64(master ^ 0x5249_4553_434f_4d50);
    let h1 = splitmix64(h0 ^ replication);
    let h2 = splitmix64(h1 ^ tag.id());
    let mut key = [0u8; 32];
    for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
        let word = splitmix64(h2.wrapping_add((i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    key
}

pub fn stream_rng(master: u64, replication: u64, tag: StreamTag) -> SampleRng {
    ChaCha8Rng::from_seed(stream_key(master, replication, tag))
}
