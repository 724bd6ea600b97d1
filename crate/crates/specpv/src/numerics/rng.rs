//! Deterministic random number generator with a pinned algorithm.
//!
//! The state is seeded with four SplitMix64 outputs and advanced with
//! xoshiro256++, giving identical streams for identical seeds on every
//! platform. Constants and the update rule are documented in
//! `docs/determinism.md`; tests pin the first outputs for seed 0.

use crate::error::{Error, Result};

const SPLITMIX_GAMMA: u64 = 0x9E3779B97F4A7C15;
const SPLITMIX_MUL1: u64 = 0xBF58476D1CE4E5B9;
const SPLITMIX_MUL2: u64 = 0x94D049BB133111EB;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(SPLITMIX_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(SPLITMIX_MUL1);
    z = (z ^ (z >> 27)).wrapping_mul(SPLITMIX_MUL2);
    z ^ (z >> 31)
}

/// xoshiro256++ generator seeded via SplitMix64.
#[derive(Debug, Clone)]
pub struct SeededRng {
    s: [u64; 4],
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        SeededRng { s }
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[0]
            .wrapping_add(self.s[3])
            .rotate_left(23)
            .wrapping_add(self.s[0]);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform f64 in [0, 1) built from the top 53 bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform f32 in (-bound, bound).
    pub fn uniform_symmetric(&mut self, bound: f32) -> f32 {
        ((self.uniform() * 2.0 - 1.0) * bound as f64) as f32
    }

    /// Draw an index proportionally to `weights`. Weights must be
    /// nonnegative with a positive sum.
    pub fn categorical(&mut self, weights: &[f32]) -> Result<usize> {
        if weights.is_empty() {
            return Err(Error::EmptyInput("empty categorical weights"));
        }
        let mut total = 0.0f64;
        for &w in weights {
            if !(w >= 0.0) {
                return Err(Error::Sampling(format!("negative categorical weight {w}")));
            }
            total += w as f64;
        }
        if total <= 0.0 {
            return Err(Error::Sampling("categorical weights sum to zero".into()));
        }
        let u = self.uniform() * total;
        let mut cum = 0.0f64;
        let mut last_positive = 0;
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                last_positive = i;
                cum += w as f64;
                if u < cum {
                    return Ok(i);
                }
            }
        }
        Ok(last_positive)
    }
}
