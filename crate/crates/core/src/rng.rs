//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a stream addressed by
//! `(master seed, purpose label, index)`. Streams are independent of call
//! order, so reordering or skipping work never perturbs other draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedTree {
    master: u64,
}

impl SeedTree {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// A derived tree whose streams are disjoint from the parent's.
    pub fn child(&self, label: &str) -> SeedTree {
        SeedTree {
            master: splitmix64(self.master ^ fnv1a(label.as_bytes())),
        }
    }

    pub fn stream(&self, label: &str, index: u64) -> ChaCha8Rng {
        let mut state = self.master ^ fnv1a(label.as_bytes()).rotate_left(17);
        state = splitmix64(state ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut seed = [0u8; 32];
        for chunk in seed.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }

    /// `n` draws from N(0, std²).
    pub fn normal_vec(&self, label: &str, index: u64, n: usize, std: f32) -> Vec<f32> {
        let mut rng = self.stream(label, index);
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z as f32) * std
            })
            .collect()
    }
}

/// Stable 64-bit FNV-1a; used for label hashing so streams survive toolchain upgrades.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
