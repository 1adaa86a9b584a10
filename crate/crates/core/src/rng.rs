//! Deterministic random streams.
//!
//! Every stochastic step in the toolkit draws from an [`RngState`]: a
//! xoshiro256++ generator whose four state words are expanded from a
//! `(master_seed, stream_id)` pair through splitmix64. The construction is
//! simple enough to be reimplemented bit-for-bit in other languages, so
//! datasets regenerated from seeds match exactly.

use num_complex::Complex64;

use crate::error::{Error, Result};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const STREAM_MIX: u64 = 0xD1B5_4A32_D192_ED03;
/// Substitute state for the (astronomically unlikely) all-zero expansion.
const NONZERO_FALLBACK: [u64; 4] = [
    0x9E37_79B9_7F4A_7C15,
    0xBF58_476D_1CE4_E5B9,
    0x94D0_49BB_1331_11EB,
    0xD1B5_4A32_D192_ED03,
];
const INV_2_POW_53: f64 = 1.0 / (1u64 << 53) as f64;

/// One step of the splitmix64 recurrence. Advances `state` and returns the
/// mixed output.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// xoshiro256++ state. Never all-zero.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RngState {
    s: [u64; 4],
}

impl RngState {
    /// Expands `master_seed ^ mix(stream_id)` through four splitmix64 steps.
    pub fn seed_from(master_seed: u64, stream_id: u64) -> Self {
        let mut sm = master_seed ^ stream_id.wrapping_mul(STREAM_MIX);
        let mut s = [0u64; 4];
        for word in s.iter_mut() {
            *word = splitmix64(&mut sm);
        }
        if s == [0; 4] {
            s = NONZERO_FALLBACK;
        }
        Self { s }
    }

    pub fn words(&self) -> [u64; 4] {
        self.s
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[0].wrapping_add(s[3]).rotate_left(23).wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in `[0, 1)` from the top 53 bits.
    #[inline]
    pub fn next_uniform(&mut self) -> f64 {
        bits_to_unit(self.next_u64())
    }

    /// Uniform in `[lo, hi)`.
    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_uniform()
    }

    /// Uniform index in `0..n`. `n` must be nonzero.
    pub fn next_index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_uniform() * n as f64) as usize).min(n - 1)
    }

    /// Standard normal via basic Box–Muller; always consumes two uniforms.
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = self.next_uniform();
        let u2 = self.next_uniform();
        box_muller(u1, u2)
    }

    /// Circularly-symmetric complex normal with `E|z|^2 = variance`.
    pub fn next_complex_gaussian(&mut self, variance: f64) -> Result<Complex64> {
        if !(variance > 0.0) {
            return Err(Error::invalid(format!(
                "complex gaussian variance must be positive, got {variance}"
            )));
        }
        let scale = (variance / 2.0).sqrt();
        let re = self.next_gaussian();
        let im = self.next_gaussian();
        Ok(Complex64::new(scale * re, scale * im))
    }
}

/// Maps raw generator output to `[0, 1)`.
#[inline]
pub fn bits_to_unit(bits: u64) -> f64 {
    (bits >> 11) as f64 * INV_2_POW_53
}

/// `sqrt(-2 ln u1) * cos(2 pi u2)`, with `u1 = 0` replaced by `2^-53`.
pub fn box_muller(u1: f64, u2: f64) -> f64 {
    let u1 = if u1 <= 0.0 { INV_2_POW_53 } else { u1 };
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
