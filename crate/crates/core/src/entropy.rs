//! Seedable entropy streams.
//!
//! Every stochastic element in the simulator draws its randomness from an
//! [`EntropyStream`]. The generator is xorshift64* (Marsaglia's xorshift
//! with shift triple `(12, 25, 27)` followed by multiplication by
//! `0x2545F4914F6CDD1D`); callers receive the high bits of each output word.
//!
//! Seeding and forking both pass through [`mix64`], the splitmix64
//! finalizer:
//!
//! ```text
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! z =  z ^ (z >> 31)
//! ```
//!
//! * initial state = `mix64(seed + 0x9E3779B97F4A7C15)`, replaced by
//!   `0x9E3779B97F4A7C15` in the (single) case where that is zero;
//! * `fork(seed, id)` has seed `mix64(seed ^ mix64(id ^ 0xD1B54A32D192ED03))`.
//!
//! All arithmetic is wrapping on 64-bit words.

use crate::error::{Error, Result};

/// Seed used when the caller does not supply one.
pub const DEFAULT_SEED: u64 = 0x5EED_2013_C1C0_17A1;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const FORK_SALT: u64 = 0xD1B5_4A32_D192_ED03;
const MULTIPLIER: u64 = 0x2545_F491_4F6C_DD1D;

/// splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EntropyStream {
    seed: u64,
    state: u64,
    draws: u64,
}

impl EntropyStream {
    pub fn new(seed: u64) -> Self {
        let mut state = mix64(seed.wrapping_add(GOLDEN));
        if state == 0 {
            state = GOLDEN;
        }
        Self {
            seed,
            state,
            draws: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of `next_bits` calls made so far.
    pub fn draws_consumed(&self) -> u64 {
        self.draws
    }

    /// Child stream that depends only on `(self.seed(), child_id)`, never on
    /// how far this stream has advanced.
    pub fn fork(&self, child_id: u64) -> EntropyStream {
        EntropyStream::new(mix64(self.seed ^ mix64(child_id ^ FORK_SALT)))
    }

    #[inline]
    fn step(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        self.draws += 1;
        x.wrapping_mul(MULTIPLIER)
    }

    /// `n` uniformly distributed bits, `1 <= n <= 64`.
    pub fn next_bits(&mut self, n: u32) -> Result<u64> {
        if n == 0 || n > 64 {
            return Err(Error::InvalidWidth(n));
        }
        Ok(self.bits(n))
    }

    /// Unchecked variant of [`next_bits`](Self::next_bits) for internal callers
    /// that have already validated the width.
    #[inline]
    pub(crate) fn bits(&mut self, n: u32) -> u64 {
        debug_assert!((1..=64).contains(&n));
        self.step() >> (64 - n)
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.bits(53) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `(0, 1]`; never returns zero, so `ln` is always finite.
    #[inline]
    pub fn uniform_open0(&mut self) -> f64 {
        (self.bits(53) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Unbiased integer in `[0, bound)` by rejection on the next power of two.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "below(0)");
        if bound == 1 {
            return 0;
        }
        let width = 64 - (bound - 1).leading_zeros();
        loop {
            let r = self.bits(width);
            if r < bound {
                return r;
            }
        }
    }
}

impl rand_core::RngCore for EntropyStream {
    fn next_u32(&mut self) -> u32 {
        self.bits(32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.bits(64)
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let word = self.bits(64).to_le_bytes();
            chunk.copy_from_slice(&word[..chunk.len()]);
        }
    }
}
