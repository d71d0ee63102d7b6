//! Small seeded generator shared by the LDA sampler and the deterministic
//! embedding provider.
//!
//! State advances with the 64-bit MMIX linear congruential step
//! `s <- 6364136223846793005 * s + 1442695040888963407 (mod 2^64)` and each
//! output is the PCG "RXS-M-XS" permutation of the new state. All arithmetic is
//! wrapping integer arithmetic, so streams are identical on every platform.

const MULTIPLIER: u64 = 6_364_136_223_846_793_005;
const INCREMENT: u64 = 1_442_695_040_888_963_407;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lcg64 {
    state: u64,
}

impl Lcg64 {
    pub fn new(seed: u64) -> Self {
        let mut rng = Self { state: seed };
        // Mix the seed once so that small seeds do not start near zero.
        rng.state = rng.state.wrapping_add(INCREMENT);
        rng.next_u64();
        rng
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_mul(MULTIPLIER).wrapping_add(INCREMENT);
        let s = self.state;
        let word = ((s >> ((s >> 59) + 5)) ^ s).wrapping_mul(12_605_985_483_714_917_081);
        (word >> 43) ^ word
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)` by multiply-and-reject.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "bound must be positive");
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let wide = u128::from(self.next_u64()) * u128::from(bound);
            if (wide as u64) >= threshold {
                return (wide >> 64) as u64;
            }
        }
    }
}
