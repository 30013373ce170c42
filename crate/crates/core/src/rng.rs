//! The single random source of the simulator.
//!
//! Generator: xoshiro256** seeded from a `u64` through SplitMix64 (four
//! successive SplitMix64 outputs form the state). Derived draws:
//!
//! * uniform `[0, 1)`: `(next_u64 >> 11) * 2^-53`
//! * index in `0..n`: `floor(uniform * n)`
//! * standard normal: Box-Muller, `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`,
//!   one value per two uniforms
//! * Gamma(alpha, 1): Marsaglia-Tsang with only the logarithmic acceptance
//!   test; for `alpha < 1`, `Gamma(alpha + 1) * u^(1/alpha)`
//!
//! These rules are fixed so partitions and datasets can be regenerated
//! bit-for-bit by other implementations.

use rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

/// Mixes a seed with a stream tag so independent consumers get disjoint streams.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut z = seed;
    for &tag in tags {
        z = splitmix64(z ^ splitmix64(tag.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    z
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct SimRng {
    inner: Xoshiro256StarStar,
}

impl SimRng {
    pub fn seed_from_u64(seed: u64) -> Self {
        Self {
            inner: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn index(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n.saturating_sub(1))
    }

    pub fn standard_normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn gamma(&mut self, alpha: f64) -> f64 {
        debug_assert!(alpha > 0.0);
        if alpha < 1.0 {
            let g = self.gamma(alpha + 1.0);
            let u = self.uniform();
            return g * u.powf(1.0 / alpha);
        }
        let d = alpha - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.standard_normal();
            let t = 1.0 + c * x;
            if t <= 0.0 {
                continue;
            }
            let v = t * t * t;
            let u = self.uniform();
            if u > 0.0 && u.ln() < 0.5 * x * x + d - d * v + d * v.ln() {
                return d * v;
            }
        }
    }

    /// Fisher-Yates, walking from the last slot down.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}
