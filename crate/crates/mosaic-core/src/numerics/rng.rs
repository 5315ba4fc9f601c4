//! Deterministic seeded randomness.
//!
//! The generator is pinned so fixtures stay portable across languages and
//! platforms:
//!
//! * state seeding: SplitMix64 (Steele, Lea & Flood 2014), the canonical
//!   recipe for expanding a 64-bit seed into generator state;
//! * stream: xoshiro256++ (Blackman & Vigna 2019) with the reference
//!   constants;
//! * uniform doubles: the top 53 bits of each output, `(x >> 11) * 2^-53`,
//!   uniform on `[0, 1)`;
//! * normals: Box–Muller on two uniforms, `sqrt(-2 ln u1) * cos/sin(2π u2)`
//!   with the cosine draw returned first and the sine draw cached. `u1` is
//!   shifted into `(0, 1]` so the logarithm is always finite.
//!
//! All transcendentals go through `libm`, so identical seeds give identical
//! streams everywhere.

/// SplitMix64 step; used for seeding and for deriving sub-seeds.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a stream tag.
///
/// Used wherever one master seed must fan out into independent deterministic
/// streams (per parameter, per grid cell, per tree).
pub fn derive_seed(parent: u64, tag: u64) -> u64 {
    let mut s = parent ^ tag.wrapping_mul(0xA24BAED4963EE407);
    splitmix64(&mut s)
}

/// FNV-1a hash of a byte string; stable tag for [`derive_seed`].
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF29CE484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001B3);
    }
    h
}

/// xoshiro256++ stream with Box–Muller normal sampling.
#[derive(Debug, Clone)]
pub struct SeededRng {
    s: [u64; 4],
    spare_normal: Option<f64>,
}

impl SeededRng {
    /// Seed the stream; identical seeds yield identical streams.
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        SeededRng { s, spare_normal: None }
    }

    /// Next raw 64-bit output.
    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[0]
            .wrapping_add(s[3])
            .rotate_left(23)
            .wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform double on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`; `n` must be nonzero.
    ///
    /// Debiased multiply-shift rejection (Lemire 2019).
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        loop {
            let x = self.next_u64();
            let m = (x as u128).wrapping_mul(n as u128);
            let low = m as u64;
            if low >= n.wrapping_neg() % n {
                return (m >> 64) as u64;
            }
        }
    }

    /// Normal draw with the given mean and standard deviation.
    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.standard_normal()
    }

    /// Standard normal draw.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1]: shift the 53-bit integer by one before scaling.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        let radius = libm::sqrt(-2.0 * libm::log(u1));
        let angle = 2.0 * core::f64::consts::PI * u2;
        self.spare_normal = Some(radius * libm::sin(angle));
        radius * libm::cos(angle)
    }

    /// Fisher–Yates shuffle with this stream.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below((i + 1) as u64) as usize;
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    #[test]
    fn identical_seeds_identical_streams() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let da: Vec<f64> = (0..100).map(|_| a.normal(0.0, 1.0)).collect();
        let db: Vec<f64> = (0..100).map(|_| b.normal(0.0, 1.0)).collect();
        assert_eq!(da, db);
    }

    #[test]
    fn different_seeds_differ() {
        let mut a = SeededRng::new(1);
        let mut b = SeededRng::new(2);
        let xa: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        assert_ne!(xa, xb);
    }

    #[test]
    fn normal_sample_mean_is_small() {
        let mut rng = SeededRng::new(7);
        let n = 100_000;
        let mean = (0..n).map(|_| rng.normal(0.0, 1.0)).sum::<f64>() / n as f64;
        assert!(libm::fabs(mean) < 0.02, "sample mean {mean}");
    }

    #[test]
    fn uniform_range_and_below() {
        let mut rng = SeededRng::new(3);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
            let k = rng.below(7);
            assert!(k < 7);
        }
    }

    #[test]
    fn derive_seed_separates_tags() {
        assert_ne!(derive_seed(5, 0), derive_seed(5, 1));
        assert_eq!(derive_seed(5, 9), derive_seed(5, 9));
    }
}
